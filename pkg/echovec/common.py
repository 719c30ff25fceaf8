#!/usr/bin/env python3
#
# common.py - part of the echovec embedding tools
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.
#
# You should have received a copy of the GNU Affero General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.

# common.py is imported by all modules, so do not import heavy
# third-party libraries here as they will become a requirement for all
# commands.

import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import yaml

from . import _
from .exception import ConfigurationException, InvalidInput

ENDPOINT_ENV = 'ECHOVEC_ENDPOINT'
DEFAULT_CONFIG_FILE = 'echovec.json'

config = None
options = None


default_config = {
    'backend': 'synthetic',
    'endpoint': None,
    'dim': 32,
    'timeout': 60.0,
    'max_parallel': 4,
    'cache_path': None,
    'seed': 0,
    'latent_dim': 8,
    'icl_blend': 0.8,
    'noise_scale': 0.1,
    'shared_maps': True,
    'prompt_variant': 'OneWordWithExemplars',
    'exemplars_path': None,
    'audio_exemplars_as': 'caption',
    'adapter_path': None,
    'tau': 0.05,
    'batch_size': 16,
    'epochs': 1,
    'learning_rate': 1e-3,
    'optimizer': 'adam',
    'exclude_self_negative': False,
    'ks': [1, 5, 10],
    'multi_reference': True,
    'retain': 200,
    'budget_text': 65,
    'budget_audio': 35,
    'llm_endpoint': None,
    'distractors': 3,
    'mix_duration': None,
}

# keys whose default is None still need a type
_optional_types = {
    'endpoint': str,
    'cache_path': str,
    'exemplars_path': str,
    'adapter_path': str,
    'llm_endpoint': str,
    'mix_duration': float,
}

_choices = {
    'backend': ('remote', 'synthetic'),
    'prompt_variant': ('Plain', 'OneWord', 'OneWordWithExemplars'),
    'audio_exemplars_as': ('caption', 'reference'),
    'optimizer': ('sgd', 'adam'),
}


def setup_global_opts(parser):
    parser.add_argument("-v", "--verbose", action="store_true", default=False,
                        help=_("Spew out even more information than normal"))
    parser.add_argument("-q", "--quiet", action="store_true", default=False,
                        help=_("Restrict output to warnings and errors"))
    parser.add_argument("--config", default=None,
                        help=_("JSON config file, defaults to ./{name} if present")
                        .format(name=DEFAULT_CONFIG_FILE))


def add_backend_arguments(parser):
    """Flags shared by every command that talks to an embedding backend."""
    parser.add_argument("--backend", choices=_choices['backend'], default=None,
                        help=_("Embedding provider to use"))
    parser.add_argument("--endpoint", default=None,
                        help=_("Base URL of the hidden-state server (remote backend)"))
    parser.add_argument("--dim", type=int, default=None,
                        help=_("Embedding dimension"))
    parser.add_argument("--seed", type=int, default=None,
                        help=_("Seed for the synthetic world and all sampling"))
    parser.add_argument("--cache", dest='cache_path', default=None,
                        help=_("Directory holding the embedding cache"))
    parser.add_argument("--max-parallel", dest='max_parallel', type=int, default=None,
                        help=_("Bound on in-flight backend requests"))
    parser.add_argument("--variant", dest='prompt_variant',
                        choices=_choices['prompt_variant'], default=None,
                        help=_("Prompt configuration used to embed items"))
    parser.add_argument("--exemplars", dest='exemplars_path', default=None,
                        help=_("ExemplarSet JSON used for in-context prompts"))


def add_output_argument(parser):
    parser.add_argument("-o", "--out", default=None,
                        help=_("Write the result here instead of stdout"))


def _check_type(key, value):
    if value is None:
        return value
    expected = _optional_types.get(key)
    if expected is None:
        expected = type(default_config[key])
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigurationException(
            _("'{key}' must be an integer, not {value!r}").format(key=key, value=value))
    if not isinstance(value, expected):
        raise ConfigurationException(
            _("'{key}' must be of type {type}, not {value!r}")
            .format(key=key, type=expected.__name__, value=value))
    if key in _choices and value not in _choices[key]:
        raise ConfigurationException(
            _("'{key}' must be one of {choices}, not {value!r}")
            .format(key=key, choices=', '.join(_choices[key]), value=value))
    if key == 'ks' and not all(isinstance(k, int) and k >= 1 for k in value):
        raise ConfigurationException(_("'ks' must be a list of positive integers"))
    return value


def fill_config_defaults(thisconfig):
    """Fill in the config dict with the defaults for every missing key."""
    for k, v in default_config.items():
        if k not in thisconfig:
            if isinstance(v, (dict, list)):
                thisconfig[k] = v.copy()
            else:
                thisconfig[k] = v


def read_config(opts=None):
    """Read the run config.

    The config file is JSON (parsed with the YAML loader, JSON being a
    subset of YAML).  Unknown keys are rejected.  Values given on the
    command line win over the file, and the ECHOVEC_ENDPOINT environment
    variable wins over a configured endpoint unless --endpoint is given.

    """
    global config, options

    if config is not None:
        return config

    options = opts

    config_file = getattr(opts, 'config', None)
    if config_file is None and os.path.exists(DEFAULT_CONFIG_FILE):
        config_file = DEFAULT_CONFIG_FILE

    thisconfig = {}
    if config_file is not None:
        if not os.path.exists(config_file):
            raise ConfigurationException(
                _("Config file '{path}' does not exist").format(path=config_file))
        logging.debug(_("Reading '{config_file}'").format(config_file=config_file))
        with open(config_file, encoding='utf-8') as fp:
            try:
                thisconfig = yaml.safe_load(fp)
            except yaml.YAMLError as e:
                raise ConfigurationException(
                    _("Cannot parse '{path}'").format(path=config_file), str(e)) from e
        if not thisconfig:
            thisconfig = {}
        if not isinstance(thisconfig, dict):
            raise ConfigurationException(
                _("'{path}' must contain a JSON object").format(path=config_file))

    unknown = sorted(k for k in thisconfig if k not in default_config)
    if unknown:
        raise ConfigurationException(
            _("Unknown config keys: {keys}").format(keys=', '.join(unknown)))

    env_endpoint = os.getenv(ENDPOINT_ENV)
    if env_endpoint:
        thisconfig['endpoint'] = env_endpoint

    if opts is not None:
        for k in default_config:
            v = getattr(opts, k, None)
            if v is not None:
                thisconfig[k] = v

    for k, v in list(thisconfig.items()):
        thisconfig[k] = _check_type(k, v)

    fill_config_defaults(thisconfig)

    for k in ('exemplars_path', 'adapter_path'):
        path = thisconfig.get(k)
        if path is not None and not os.path.exists(path):
            raise ConfigurationException(
                _("'{key}' points to missing file '{path}'").format(key=k, path=path))

    config = thisconfig
    return config


class Encoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, set):
            return sorted(obj)
        # numpy scalars and arrays, without importing numpy here
        if hasattr(obj, 'tolist'):
            return obj.tolist()
        return super().default(obj)


def dumps_json(obj, pretty=True):
    if pretty:
        return json.dumps(obj, sort_keys=True, cls=Encoder, indent=2) + '\n'
    return json.dumps(obj, sort_keys=True, cls=Encoder, separators=(',', ':'))


def write_atomic(path, data):
    """Write bytes or str to path via a temp file in the same dir and a rename.

    On any failure the temp file is removed, so no partial output is
    ever left behind.
    """
    if isinstance(data, str):
        data = data.encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix='.' + path.name + '.', dir=str(path.parent))
    try:
        with os.fdopen(fd, 'wb') as fp:
            fp.write(data)
        os.replace(tmp, str(path))
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_output(text, out=None):
    """Send a machine-readable result to --out, or stdout when not set."""
    if out:
        write_atomic(out, text)
        logging.info(_("Wrote '{path}'").format(path=out))
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def read_jsonl(path):
    """Stream (line number, object) pairs from a JSON Lines file.

    Blank lines are skipped, line numbers count from 1.
    """
    with open(path, encoding='utf-8') as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise InvalidInput(
                    _("{path}: line {lineno}: not valid JSON")
                    .format(path=path, lineno=lineno), str(e)) from e
            if not isinstance(obj, dict):
                raise InvalidInput(_("{path}: line {lineno}: expected a JSON object")
                                   .format(path=path, lineno=lineno))
            yield lineno, obj


def parse_ks(text):
    """Parse a K list such as '1,5,10'."""
    try:
        ks = sorted({int(k) for k in text.split(',') if k.strip()})
    except ValueError as e:
        raise ConfigurationException(_("Invalid K list '{text}'").format(text=text)) from e
    if not ks or ks[0] < 1:
        raise ConfigurationException(_("Invalid K list '{text}'").format(text=text))
    return ks


def ordered_map(func, items, max_parallel=1):
    """Map func over items with at most max_parallel calls in flight.

    Results come back in input order whatever order the calls finish in.
    """
    items = list(items)
    if max_parallel <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=max_parallel) as executor:
        return list(executor.map(func, items))
