#!/usr/bin/env python3
#
# exemplars.py - part of the echovec embedding tools
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
from .exception import InvalidInput
from .prompt import ChatScorer, ChatSummarizer, generate_candidate_summaries, score_and_select
from .vectors import Modality

config = None
options = None


def load_candidates(path):
    """Read {"id", "modality", "caption"} lines into per-modality lists."""
    grouped = {Modality.TEXT: ([], []), Modality.AUDIO: ([], [])}
    for lineno, obj in common.read_jsonl(path):
        try:
            modality = Modality.parse(obj.get('modality', 'text'))
            item_id, caption = obj['id'], obj['caption']
        except (KeyError, InvalidInput) as e:
            raise InvalidInput(_("{path}: line {lineno}: not a candidate")
                               .format(path=path, lineno=lineno), str(e)) from e
        if not isinstance(caption, str) or not caption.strip():
            raise InvalidInput(_("{path}: line {lineno}: empty caption")
                               .format(path=path, lineno=lineno))
        ids, captions = grouped[modality]
        ids.append(str(item_id))
        captions.append(caption)
    return grouped


def select_exemplars(grouped, summarizer=None, scorer=None, retain=200, budget=(65, 35),
                     fallback=True, max_parallel=1):
    candidates = []
    for modality, (ids, captions) in grouped.items():
        candidates += generate_candidate_summaries(captions, summarizer, modality, ids,
                                                   fallback, max_parallel)
    return score_and_select(candidates, scorer, retain, budget, fallback, max_parallel)


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_output_argument(parser)
    parser.add_argument("candidates", help=_("Candidate captions as JSON Lines"))
    parser.add_argument("--retain", type=int, default=None,
                        help=_("Candidates kept after scoring"))
    parser.add_argument("--budget-text", dest='budget_text', type=int, default=None,
                        help=_("Text exemplars to select"))
    parser.add_argument("--budget-audio", dest='budget_audio', type=int, default=None,
                        help=_("Audio exemplars to select"))
    parser.add_argument("--llm-endpoint", dest='llm_endpoint', default=None,
                        help=_("Chat completion server for summaries and scores"))
    parser.add_argument("--no-fallback", dest='fallback', action='store_false', default=True,
                        help=_("Fail instead of using the built-in rules when the LLM fails"))
    parser.add_argument("--max-parallel", dest='max_parallel', type=int, default=None,
                        help=_("Bound on in-flight LLM requests"))
    options = parser.parse_args()
    config = common.read_config(options)

    summarizer = scorer = None
    if config['llm_endpoint']:
        client = net.ChatClient(config['llm_endpoint'], timeout=config['timeout'])
        summarizer, scorer = ChatSummarizer(client), ChatScorer(client)
    selected = select_exemplars(load_candidates(options.candidates), summarizer, scorer,
                                config['retain'],
                                (config['budget_text'], config['budget_audio']),
                                options.fallback, config['max_parallel'])
    common.write_output(selected.to_json(), options.out)


if __name__ == "__main__":
    main()
