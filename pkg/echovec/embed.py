#!/usr/bin/env python3
#
# embed.py - part of the echovec embedding tools
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
from .backend import BackendConfig, embed_items, load_items, make_backend
from .exception import InvalidInput
from .prompt import PromptVariant, load_exemplars
from .store import EmbeddingStore
from .train import AdapterParams, apply_adapter
from .vectors import Modality

config = None
options = None


def embed_to_store(items, backend, variant, exemplars=None, adapter=None,
                   audio_exemplars_as='caption'):
    """Embed items into a new EmbeddingStore, through the adapter when given."""
    vectors = embed_items(backend, items, variant, exemplars, audio_exemplars_as)
    if adapter is not None:
        vectors = [apply_adapter(v, adapter) for v in vectors]
    return EmbeddingStore(backend.cfg.dim, vectors)


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_backend_arguments(parser)
    parser.add_argument("items", help=_("Items to embed, as JSON Lines"))
    parser.add_argument("-o", "--out", required=True,
                        help=_("Embedding store to write"))
    parser.add_argument("--adapter", dest='adapter_path', default=None,
                        help=_("Apply these trained adapter parameters"))
    parser.add_argument("--modality", choices=("text", "audio"), default=None,
                        help=_("Only embed items of this modality"))
    options = parser.parse_args()
    config = common.read_config(options)

    variant = PromptVariant(config['prompt_variant'])
    exemplars = load_exemplars(config) if variant.needs_exemplars else None
    adapter = AdapterParams.read(config['adapter_path']) if config['adapter_path'] else None

    items = load_items(options.items)
    if options.modality:
        wanted = Modality.parse(options.modality)
        items = [item for item in items if item.modality is wanted]
    if not items:
        raise InvalidInput(_("'{path}' holds no items").format(path=options.items))
    logging.info(_("Embedding {n} items with the {variant} prompt")
                 .format(n=len(items), variant=variant.value))
    with make_backend(BackendConfig.from_config(config)) as backend:
        store = embed_to_store(items, backend, variant, exemplars, adapter,
                               config['audio_exemplars_as'])
    store.write(options.out)
    logging.info(_("Wrote {n} embeddings to '{path}'").format(n=len(store), path=options.out))


if __name__ == "__main__":
    main()
