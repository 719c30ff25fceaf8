#!/usr/bin/env python3
#
# pca.py - part of the echovec embedding tools
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
from .retrieval import pca_csv, pca_project
from .store import EmbeddingStore

config = None
options = None


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_output_argument(parser)
    parser.add_argument("stores", nargs='+', help=_("Embedding stores to project together"))
    parser.add_argument("--dims", type=int, default=2,
                        help=_("Number of principal components"))
    parser.add_argument("--explained", default=None,
                        help=_("Also write the explained-variance fractions as JSON here"))
    options = parser.parse_args()
    config = common.read_config(options)

    vectors = []
    for path in options.stores:
        store = EmbeddingStore.read(path)
        if vectors and store.dim != vectors[0].dim:
            raise DimMismatch(_("'{path}' has dimension {got}, expected {dim}")
                              .format(path=path, got=store.dim, dim=vectors[0].dim))
        vectors.extend(store)

    projection = pca_project(vectors, options.dims)
    logging.info(_("Explained variance: {fractions}").format(
        fractions=', '.join('{:.4f}'.format(f) for f in projection.explained)))
    if options.explained:
        common.write_atomic(options.explained, common.dumps_json(
            {'explained': projection.explained, 'rank': projection.rank}))
    common.write_output(pca_csv([v.item_id for v in vectors], [v.modality for v in vectors],
                                projection.coordinates), options.out)


if __name__ == "__main__":
    main()
