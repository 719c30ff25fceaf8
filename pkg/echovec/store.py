#!/usr/bin/env python3
#
# store.py - part of the echovec embedding tools
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

"""The embedding store file format.

Little-endian, no padding anywhere::

    b'EVEC'  magic
    u32      format version (1)
    u32      dim
    u64      record count
    then per record:
    u16      id length in bytes
    bytes    UTF-8 id
    u8       modality (0 text, 1 audio)
    f32*dim  values

Values are stored as 32-bit floats and promoted back to doubles when
read, so a read/write cycle reproduces the file byte for byte.
"""

import logging
import struct

import numpy as np

from . import _
from . import common
from .exception import DimMismatch, FormatMismatch, InvalidInput
from .vectors import EmbeddingVector, Modality

MAGIC = b'EVEC'
FORMAT_VERSION = 1

_HEADER = struct.Struct('<4sIIQ')
_ID_LEN = struct.Struct('<H')
_MODALITY = struct.Struct('<B')


class EmbeddingStore:
    """An ordered collection of embeddings of one dimension, keyed by item id."""

    def __init__(self, dim, records=None):
        if not isinstance(dim, int) or dim <= 0:
            raise InvalidInput(_("Store dimension must be a positive integer"))
        self.dim = dim
        self.records = []
        self._index = {}
        for record in records or []:
            self.add(record)

    def add(self, vector):
        if vector.dim != self.dim:
            raise DimMismatch(_("'{item_id}' has dimension {got}, store has {dim}")
                              .format(item_id=vector.item_id, got=vector.dim, dim=self.dim))
        if vector.item_id in self._index:
            raise InvalidInput(_("Duplicate item id '{item_id}' in store")
                               .format(item_id=vector.item_id))
        if len(vector.item_id.encode('utf-8')) > 0xFFFF:
            raise InvalidInput(_("Item id is too long for the store format"))
        self._index[vector.item_id] = len(self.records)
        self.records.append(vector)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, item_id):
        return item_id in self._index

    def get(self, item_id):
        return self.records[self._index[item_id]]

    @property
    def ids(self):
        return [r.item_id for r in self.records]

    def matrix(self):
        if not self.records:
            return np.zeros((0, self.dim))
        return np.vstack([r.values for r in self.records])

    def modalities(self):
        return {r.modality for r in self.records}

    def to_bytes(self):
        chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, self.dim, len(self.records))]
        for record in self.records:
            encoded = record.item_id.encode('utf-8')
            chunks.append(_ID_LEN.pack(len(encoded)))
            chunks.append(encoded)
            chunks.append(_MODALITY.pack(record.modality.value))
            chunks.append(record.values.astype('<f4').tobytes())
        return b''.join(chunks)

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size:
            raise FormatMismatch(_("Truncated embedding store header"))
        magic, version, dim, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatMismatch(_("Not an embedding store (bad magic {magic!r})")
                                 .format(magic=magic))
        if version != FORMAT_VERSION:
            raise FormatMismatch(_("Unsupported store format version {version}")
                                 .format(version=version))
        store = cls(dim)
        offset = _HEADER.size
        width = 4 * dim
        try:
            for _i in range(count):
                (id_len,) = _ID_LEN.unpack_from(data, offset)
                offset += _ID_LEN.size
                item_id = data[offset:offset + id_len].decode('utf-8')
                offset += id_len
                (tag,) = _MODALITY.unpack_from(data, offset)
                offset += _MODALITY.size
                if offset + width > len(data):
                    raise struct.error('values')
                values = np.frombuffer(data, dtype='<f4', count=dim, offset=offset)
                offset += width
                store.add(EmbeddingVector(values.astype(np.float64),
                                          Modality.parse(tag), item_id))
        except (struct.error, UnicodeDecodeError) as e:
            raise FormatMismatch(_("Truncated or corrupt embedding store"), str(e)) from e
        if offset != len(data):
            raise FormatMismatch(_("{n} trailing bytes after the last record")
                                 .format(n=len(data) - offset))
        return store

    def write(self, path):
        common.write_atomic(path, self.to_bytes())
        logging.debug(_("Wrote {count} embeddings to '{path}'")
                      .format(count=len(self), path=path))

    @classmethod
    def read(cls, path):
        with open(path, 'rb') as fp:
            return cls.from_bytes(fp.read())
