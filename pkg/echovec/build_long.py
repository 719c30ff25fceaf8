#!/usr/bin/env python3
#
# build_long.py - part of the echovec embedding tools
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

from argparse import ArgumentParser

from . import _
from . import common
from . import net
from .benchmark import ChatRewriter, build_long_captions, load_caption_groups, records_jsonl

config = None
options = None


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_output_argument(parser)
    parser.add_argument("captions", help=_("CSV with clip_id and caption_1 ... caption_5"))
    parser.add_argument("--llm-endpoint", dest='llm_endpoint', default=None,
                        help=_("Chat completion server used to rewrite the captions"))
    parser.add_argument("--no-fallback", dest='fallback', action='store_false', default=True,
                        help=_("Fail instead of joining captions when the rewriter fails"))
    parser.add_argument("--max-parallel", dest='max_parallel', type=int, default=None,
                        help=_("Bound on in-flight rewriter requests"))
    parser.add_argument("--stats", default=None,
                        help=_("Write word count statistics as JSON here"))
    options = parser.parse_args()
    config = common.read_config(options)

    rewriter = None
    if config['llm_endpoint']:
        rewriter = ChatRewriter(net.ChatClient(config['llm_endpoint'], timeout=config['timeout']))
    records, stats = build_long_captions(load_caption_groups(options.captions), rewriter,
                                         options.fallback, config['max_parallel'])
    if options.stats:
        common.write_atomic(options.stats, common.dumps_json(stats))
    common.write_output(records_jsonl(records), options.out)


if __name__ == "__main__":
    main()
