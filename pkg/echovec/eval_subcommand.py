#!/usr/bin/env python3
#
# eval_subcommand.py - part of the echovec embedding tools
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
from argparse import ArgumentParser

from . import _
from . import common
from .exception import DimMismatch
from .retrieval import Direction, RetrievalCorpus, invert_relevance, load_relevance, \
    recall_at_k, reports_json
from .store import EmbeddingStore

config = None
options = None

DIRECTIONS = {
    'text-to-audio': [Direction.TEXT_TO_AUDIO],
    'audio-to-text': [Direction.AUDIO_TO_TEXT],
    'both': [Direction.TEXT_TO_AUDIO, Direction.AUDIO_TO_TEXT],
}


def evaluate(text_store, audio_store, relevance, directions, ks, multi_reference=True,
             config_label=''):
    """EvalReports for each direction; relevance maps text ids to audio ids."""
    if text_store.dim != audio_store.dim:
        raise DimMismatch(_("Text store has dimension {t}, audio store {a}")
                          .format(t=text_store.dim, a=audio_store.dim))
    reports = []
    for direction in directions:
        if direction is Direction.TEXT_TO_AUDIO:
            queries, corpus = text_store, RetrievalCorpus(audio_store, relevance)
        else:
            queries = audio_store
            corpus = RetrievalCorpus(text_store, invert_relevance(relevance))
        report = recall_at_k(queries, corpus, ks, direction, multi_reference, config_label)
        logging.info(_("{direction}: {recall}").format(
            direction=direction.value,
            recall=', '.join('R@{k}={v:.4f}'.format(k=k, v=v)
                             for k, v in sorted(report.recall.items()))))
        reports.append(report)
    return reports


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_output_argument(parser)
    parser.add_argument("text_store", help=_("Embedding store of the text items"))
    parser.add_argument("audio_store", help=_("Embedding store of the audio items"))
    parser.add_argument("relevance", help=_("JSON object mapping text ids to audio ids"))
    parser.add_argument("--direction", choices=sorted(DIRECTIONS), default='both',
                        help=_("Retrieval direction(s) to evaluate"))
    parser.add_argument("--k", default=None,
                        help=_("Comma separated K values, e.g. 1,5,10"))
    parser.add_argument("--single-reference", dest='multi_reference',
                        action='store_const', const=False, default=None,
                        help=_("Score every relevant item separately instead of any-hit"))
    parser.add_argument("--label", default='',
                        help=_("Configuration label to put in the reports"))
    options = parser.parse_args()
    config = common.read_config(options)

    ks = common.parse_ks(options.k) if options.k else config['ks']
    reports = evaluate(EmbeddingStore.read(options.text_store),
                       EmbeddingStore.read(options.audio_store),
                       load_relevance(options.relevance), DIRECTIONS[options.direction], ks,
                       config['multi_reference'], options.label)
    common.write_output(reports_json(reports), options.out)


if __name__ == "__main__":
    main()
