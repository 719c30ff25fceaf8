#!/usr/bin/env python3
#
# echovec/__main__.py - part of the echovec embedding tools
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
import sys
from argparse import ArgumentError
from collections import OrderedDict

from echovec import _
from echovec.exception import EchoVecException

USAGE_EXIT = 2
IO_EXIT = 4

COMMANDS = OrderedDict([
    ("embed", _("Embed text and audio items into an embedding store")),
    ("train", _("Train the adapter on text triplets")),
    ("eval", _("Compute Recall@K between a text and an audio store")),
    ("gap", _("Measure the modality gap between text and audio embeddings")),
    ("ablate", _("Run the prompt/exemplar/adapter ablation table")),
    ("pca", _("Project embeddings on principal components for plotting")),
    ("exemplars", _("Select in-context exemplars from candidate captions")),
    ("build-long", _("Build the long-caption retrieval benchmark")),
    ("build-conditional", _("Build the conditional mixed-audio benchmark")),
])

# subcommand names that are not valid module names
MODULES = {
    'eval': 'eval_subcommand',
    'build-long': 'build_long',
    'build-conditional': 'build_conditional',
}


def print_help():
    print(_("usage: ") + _("echovec [<command>] [-h|--help|--version|<args>]"))
    print("")
    print(_("Valid commands are:"))
    for cmd, summary in COMMANDS.items():
        print("   " + cmd + ' ' * (20 - len(cmd)) + summary)
    print("")


def print_version():
    from importlib.metadata import PackageNotFoundError, version

    try:
        print(version('echovec'))
    except PackageNotFoundError:
        print(_('no version info found!'))


def main():
    if len(sys.argv) <= 1:
        print_help()
        sys.exit(0)

    command = sys.argv[1]
    if command not in COMMANDS:
        if command in ('-h', '--help'):
            print_help()
            sys.exit(0)
        elif command == '--version':
            print_version()
            sys.exit(0)
        else:
            print(_("Command '{command}' not recognised.\n").format(command=command))
            print_help()
            sys.exit(USAGE_EXIT)

    verbose = any(s in sys.argv for s in ['-v', '--verbose'])
    quiet = any(s in sys.argv for s in ['-q', '--quiet'])

    # Helpful to differentiate warnings from errors even when on quiet
    logformat = '%(asctime)s %(levelname)s: %(message)s'
    loglevel = logging.INFO
    if verbose:
        loglevel = logging.DEBUG
    elif quiet:
        loglevel = logging.WARN

    logging.basicConfig(format=logformat, level=loglevel)

    if verbose and quiet:
        logging.critical(_("Conflicting arguments: '--verbose' and '--quiet' "
                           "can not be specified at the same time."))
        sys.exit(USAGE_EXIT)

    # Trick argparse into displaying the right usage when --help is used.
    sys.argv[0] += ' ' + command

    del sys.argv[1]
    module = MODULES.get(command, command)
    mod = __import__('echovec.' + module, None, None, [module])

    try:
        mod.main()
    # These are ours, contain a proper message and are "expected"
    except EchoVecException as e:
        if verbose:
            raise
        logging.critical(str(e))
        sys.exit(e.exitcode)
    except ArgumentError as e:
        logging.critical(str(e))
        sys.exit(USAGE_EXIT)
    except OSError as e:
        if verbose:
            raise
        logging.critical(str(e))
        sys.exit(IO_EXIT)
    except KeyboardInterrupt:
        print('')
        sys.exit(1)
    # These should only be unexpected crashes due to bugs in the code
    # str(e) often doesn't contain a reason, so just show the backtrace
    except Exception as e:
        logging.critical(_("Unknown exception found!"))
        raise e
    sys.exit(0)


if __name__ == "__main__":
    main()
