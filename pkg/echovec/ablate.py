#!/usr/bin/env python3
#
# ablate.py - part of the echovec embedding tools
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

"""Prompt/exemplar/adapter ablation over a text-to-audio retrieval set."""

import dataclasses
import logging
from argparse import ArgumentParser

from . import _
from . import common
from .backend import BackendConfig, BackendKind, Item, embed_items, load_items, make_backend
from .exception import ConfigurationException, InvalidInput
from .prompt import PromptVariant, load_exemplars
from .retrieval import Direction, RetrievalCorpus, load_relevance, modality_gap, recall_at_k
from .store import EmbeddingStore
from .train import AdapterParams, apply_adapter
from .vectors import Modality

config = None
options = None

ABLATION_KS = (1, 10)

SYNTHETIC_NOTE = ('Synthetic backend: exemplars close the modality offset by construction, '
                  'so the gap ordering checks pipeline wiring, not model behaviour.')


@dataclasses.dataclass(frozen=True)
class AblationRow:
    label: str
    variant: PromptVariant
    use_adapter: bool


ABLATION_ROWS = (
    AblationRow("Prompt without ``one word''", PromptVariant.PLAIN, False),
    AblationRow("Prompt with ``one word''", PromptVariant.ONE_WORD, False),
    AblationRow("``One word'' prompt with samples", PromptVariant.ONE_WORD_WITH_EXEMPLARS, False),
    AblationRow("``One word'' prompt with training", PromptVariant.ONE_WORD, True),
    AblationRow("With all proposals", PromptVariant.ONE_WORD_WITH_EXEMPLARS, True),
)


@dataclasses.dataclass
class AblationDataset:
    text_items: list
    audio_items: list
    relevance: dict


@dataclasses.dataclass
class AblationResult:
    label: str
    recall: dict
    gap: float

    def to_dict(self):
        return {
            'config_label': self.label,
            'recall': {str(k): v for k, v in sorted(self.recall.items())},
            'gap': self.gap,
        }


@dataclasses.dataclass
class AblationTable:
    rows: list
    ks: tuple
    note: str = None

    def to_dict(self):
        d = {
            'direction': Direction.TEXT_TO_AUDIO.value,
            'rows': [r.to_dict() for r in self.rows],
        }
        if self.note:
            d['note'] = self.note
        return d

    def to_json(self):
        return common.dumps_json(self.to_dict())

    def to_text(self):
        """Aligned plain-text table: configuration, R@K columns (percent) and gap."""
        headers = ['Configuration'] + ['K={k}'.format(k=k) for k in self.ks] + ['Gap']
        lines = [[r.label]
                 + ['{:.2f}'.format(100.0 * r.recall[k]) for k in self.ks]
                 + ['{:.2f}'.format(r.gap)]
                 for r in self.rows]
        widths = [max(len(row[i]) for row in [headers] + lines) for i in range(len(headers))]

        def _fmt(cells):
            first = cells[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            return '  '.join([first] + rest)

        out = [_fmt(headers), '  '.join('-' * w for w in widths)]
        out += [_fmt(cells) for cells in lines]
        if self.note:
            out += ['', self.note]
        return '\n'.join(out) + '\n'


def synthetic_dataset(n_items, prefix='clip'):
    """Paired text/audio items sharing ids, for the synthetic backend."""
    if n_items < 1:
        raise InvalidInput(_("Need at least one synthetic item"))
    ids = ['{prefix}-{i:04d}'.format(prefix=prefix, i=i) for i in range(n_items)]
    text = [Item(i, Modality.TEXT, 'a recording of {i}'.format(i=i)) for i in ids]
    audio = [Item(i, Modality.AUDIO, i) for i in ids]
    return AblationDataset(text, audio, {i: {i} for i in ids})


def dataset_from_items(items, relevance):
    text = [i for i in items if i.modality is Modality.TEXT]
    audio = [i for i in items if i.modality is Modality.AUDIO]
    if not text or not audio:
        raise InvalidInput(_("The ablation needs both text and audio items"))
    return AblationDataset(text, audio, relevance)


def run_ablation(dataset, backend, adapter=None, exemplars=None, ks=ABLATION_KS,
                 audio_exemplars_as='caption', multi_reference=True):
    """Evaluate every ablation row on text-to-audio retrieval.

    Embeddings are computed once per prompt variant and shared by the
    rows that only differ in the adapter.  Without a trained adapter the
    identity stands in, so adapter rows equal their adapter-free twins.
    """
    dim = backend.cfg.dim
    if exemplars is None:
        exemplars = load_exemplars({})
    if adapter is None:
        adapter = AdapterParams.identity(dim)
    ks = tuple(sorted(set(ks)))
    embedded = {}
    results = []
    for row in ABLATION_ROWS:
        if row.variant not in embedded:
            row_exemplars = exemplars if row.variant.needs_exemplars else None
            logging.info(_("Embedding {n} items with the {variant} prompt")
                         .format(n=len(dataset.text_items) + len(dataset.audio_items),
                                 variant=row.variant.value))
            embedded[row.variant] = (
                embed_items(backend, dataset.text_items, row.variant, row_exemplars,
                            audio_exemplars_as),
                embed_items(backend, dataset.audio_items, row.variant, row_exemplars,
                            audio_exemplars_as),
            )
        text, audio = embedded[row.variant]
        if row.use_adapter:
            text = [apply_adapter(v, adapter) for v in text]
            audio = [apply_adapter(v, adapter) for v in audio]
        corpus = RetrievalCorpus(EmbeddingStore(dim, audio), dataset.relevance)
        report = recall_at_k(EmbeddingStore(dim, text), corpus, ks, Direction.TEXT_TO_AUDIO,
                             multi_reference, row.label)
        gap = modality_gap(text, audio).gap
        results.append(AblationResult(row.label, report.recall, gap))
    note = SYNTHETIC_NOTE if backend.cfg.kind is BackendKind.SYNTHETIC else None
    return AblationTable(results, ks, note)


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_backend_arguments(parser)
    common.add_output_argument(parser)
    parser.add_argument("--items", default=None,
                        help=_("Text and audio items as JSON Lines"))
    parser.add_argument("--relevance", default=None,
                        help=_("JSON object mapping text ids to relevant audio ids"))
    parser.add_argument("--synthetic-items", dest='synthetic_items', type=int, default=200,
                        help=_("Size of the generated dataset when --items is not given"))
    parser.add_argument("--adapter", dest='adapter_path', default=None,
                        help=_("Trained adapter parameters"))
    parser.add_argument("--k", dest='k', default=None,
                        help=_("Comma separated K values, default 1,10"))
    parser.add_argument("--format", choices=('text', 'json'), default='text',
                        help=_("Output a plain-text table or JSON"))
    options = parser.parse_args()
    config = common.read_config(options)

    if options.items:
        if not options.relevance:
            raise ConfigurationException(_("--items needs --relevance"))
        dataset = dataset_from_items(load_items(options.items), load_relevance(options.relevance))
    elif config['backend'] == BackendKind.SYNTHETIC.value:
        dataset = synthetic_dataset(options.synthetic_items)
    else:
        raise ConfigurationException(_("The remote backend needs --items and --relevance"))

    ks = common.parse_ks(options.k) if options.k else ABLATION_KS
    adapter = AdapterParams.read(config['adapter_path']) if config['adapter_path'] else None
    with make_backend(BackendConfig.from_config(config)) as backend:
        table = run_ablation(dataset, backend, adapter, load_exemplars(config), ks,
                             config['audio_exemplars_as'], config['multi_reference'])

    if options.format == 'json':
        common.write_output(table.to_json(), options.out)
    else:
        common.write_output(table.to_text(), options.out)


if __name__ == "__main__":
    main()
