#!/usr/bin/env python3
#
# gap.py - part of the echovec embedding tools
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
from .retrieval import modality_gap
from .store import EmbeddingStore
from .vectors import Modality

config = None
options = None


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_output_argument(parser)
    parser.add_argument("text_store",
                        help=_("Text embeddings, or one store holding both modalities"))
    parser.add_argument("audio_store", nargs='?', default=None,
                        help=_("Audio embeddings"))
    options = parser.parse_args()
    config = common.read_config(options)

    store = EmbeddingStore.read(options.text_store)
    if options.audio_store is None:
        text = [v for v in store if v.modality is Modality.TEXT]
        audio = [v for v in store if v.modality is Modality.AUDIO]
    else:
        text = list(store)
        audio = list(EmbeddingStore.read(options.audio_store))
    report = modality_gap(text, audio)
    logging.info(_("Modality gap {gap:.4f} over {n_text} text and {n_audio} audio vectors")
                 .format(gap=report.gap, n_text=report.n_text, n_audio=report.n_audio))
    common.write_output(common.dumps_json(report.to_dict()), options.out)


if __name__ == "__main__":
    main()
