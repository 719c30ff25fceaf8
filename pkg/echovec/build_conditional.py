#!/usr/bin/env python3
#
# build_conditional.py - part of the echovec embedding tools
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

import logging
import os
from argparse import ArgumentParser

from . import _
from . import common
from . import net
from .benchmark import ChatInstructor, build_conditional_mixes, load_label_manifest, \
    mix_audio, read_wav, records_jsonl, write_wav
from .exception import ConfigurationException

config = None
options = None


def render_mixes(records, entries, audio_dir, duration=None):
    """Write <mix_id>.wav for every record and fill in manifest durations."""
    wav_paths = {e.clip_id: e.wav_path for e in entries}
    os.makedirs(audio_dir, exist_ok=True)
    for record in records:
        sources = {}
        for clip_id, _label, _gain in record.manifest.sources:
            if not wav_paths.get(clip_id):
                raise ConfigurationException(_("Clip '{clip_id}' has no wav_path")
                                             .format(clip_id=clip_id))
            sources[clip_id] = read_wav(wav_paths[clip_id])
        mixed = mix_audio(record.manifest, sources, duration)
        record.manifest.duration = mixed.duration
        write_wav(os.path.join(audio_dir, record.mix_id + '.wav'), mixed)
        logging.debug(_("Rendered '{mix_id}'").format(mix_id=record.mix_id))


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_output_argument(parser)
    parser.add_argument("labels", help=_("CSV with clip_id, label and wav_path"))
    parser.add_argument("-n", "--records", type=int, required=True,
                        help=_("Number of records to build"))
    parser.add_argument("--seed", type=int, default=None,
                        help=_("Seed for clip sampling"))
    parser.add_argument("--distractors", type=int, default=None,
                        help=_("Distractor labels per record"))
    parser.add_argument("--duration", dest='mix_duration', type=float, default=None,
                        help=_("Mix length in seconds, default the longest source"))
    parser.add_argument("--audio-dir", dest='audio_dir', default=None,
                        help=_("Render every mix as a WAV file in this directory"))
    parser.add_argument("--llm-endpoint", dest='llm_endpoint', default=None,
                        help=_("Chat completion server used to write the instructions"))
    parser.add_argument("--no-fallback", dest='fallback', action='store_false', default=True,
                        help=_("Fail instead of using the template when the instructor fails"))
    options = parser.parse_args()
    config = common.read_config(options)

    instructor = None
    if config['llm_endpoint']:
        instructor = ChatInstructor(net.ChatClient(config['llm_endpoint'],
                                                   timeout=config['timeout']))
    entries = load_label_manifest(options.labels)
    records = build_conditional_mixes(entries, options.records, config['seed'], instructor,
                                      config['distractors'], options.fallback)
    if options.audio_dir:
        render_mixes(records, entries, options.audio_dir, config['mix_duration'])
    elif config['mix_duration'] is not None:
        for record in records:
            record.manifest.duration = config['mix_duration']
    common.write_output(records_jsonl(records), options.out)


if __name__ == "__main__":
    main()
