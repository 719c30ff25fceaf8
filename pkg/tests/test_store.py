#!/usr/bin/env python3

import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))
import testcommon  # NOQA: E402,F401

from echovec.exception import DimMismatch, FormatMismatch, InvalidInput  # NOQA: E402
from echovec.store import EmbeddingStore  # NOQA: E402
from echovec.vectors import EmbeddingVector, Modality  # NOQA: E402

GOLDEN_HEX = (
    '45564543'            # magic
    '01000000'            # version
    '02000000'            # dim
    '0100000000000000'    # count
    '0100' '61'           # id 'a'
    '00'                  # text
    '0000803f' '000000c0'  # 1.0, -2.0
)


class EmbeddingStoreTest(unittest.TestCase):
    '''echovec/store.py'''

    def setUp(self):
        self._td = tempfile.TemporaryDirectory()
        self.testdir = self._td.name

    def tearDown(self):
        self._td.cleanup()

    def test_golden_bytes(self):
        store = EmbeddingStore(2, [EmbeddingVector([1.0, -2.0], Modality.TEXT, 'a')])
        self.assertEqual(store.to_bytes(), bytes.fromhex(GOLDEN_HEX))
        loaded = EmbeddingStore.from_bytes(bytes.fromhex(GOLDEN_HEX))
        self.assertEqual(loaded.ids, ['a'])
        np.testing.assert_array_equal(loaded.get('a').values, [1.0, -2.0])

    def test_file_round_trip_is_byte_identical(self):
        rng = np.random.default_rng(7)
        records = [EmbeddingVector(rng.standard_normal(5), Modality.parse(i % 2),
                                   'item-{}'.format(i)) for i in range(12)]
        path = os.path.join(self.testdir, 'store.evec')
        EmbeddingStore(5, records).write(path)
        with open(path, 'rb') as fp:
            first = fp.read()
        loaded = EmbeddingStore.read(path)
        copy = os.path.join(self.testdir, 'copy.evec')
        loaded.write(copy)
        with open(copy, 'rb') as fp:
            self.assertEqual(fp.read(), first)
        self.assertEqual(loaded.ids, [r.item_id for r in records])
        self.assertEqual([r.modality for r in loaded], [r.modality for r in records])

    def test_unicode_ids(self):
        store = EmbeddingStore(1, [EmbeddingVector([0.5], Modality.AUDIO, 'chien-aboie-é')])
        loaded = EmbeddingStore.from_bytes(store.to_bytes())
        self.assertIn('chien-aboie-é', loaded)

    def test_empty_store(self):
        loaded = EmbeddingStore.from_bytes(EmbeddingStore(3).to_bytes())
        self.assertEqual(len(loaded), 0)
        self.assertEqual(loaded.dim, 3)

    def test_bad_magic(self):
        data = bytearray.fromhex(GOLDEN_HEX)
        data[0:4] = b'NOPE'
        with self.assertRaises(FormatMismatch):
            EmbeddingStore.from_bytes(bytes(data))

    def test_bad_version(self):
        data = bytearray.fromhex(GOLDEN_HEX)
        data[4] = 2
        with self.assertRaises(FormatMismatch):
            EmbeddingStore.from_bytes(bytes(data))

    def test_truncated(self):
        data = bytes.fromhex(GOLDEN_HEX)
        for cut in (3, 10, len(data) - 1):
            with self.assertRaises(FormatMismatch):
                EmbeddingStore.from_bytes(data[:cut])

    def test_trailing_bytes(self):
        with self.assertRaises(FormatMismatch):
            EmbeddingStore.from_bytes(bytes.fromhex(GOLDEN_HEX) + b'\0')

    def test_dim_mismatch_and_duplicates(self):
        store = EmbeddingStore(2)
        store.add(EmbeddingVector([1.0, 0.0], Modality.TEXT, 'a'))
        with self.assertRaises(DimMismatch):
            store.add(EmbeddingVector([1.0, 0.0, 0.0], Modality.TEXT, 'b'))
        with self.assertRaises(InvalidInput):
            store.add(EmbeddingVector([0.0, 1.0], Modality.TEXT, 'a'))

    def test_write_creates_parent_dirs(self):
        path = os.path.join(self.testdir, 'missing-dir-is-created', 'store.evec')
        EmbeddingStore(1).write(path)
        self.assertTrue(os.path.exists(path))
        self.assertEqual([f for f in os.listdir(os.path.dirname(path))], ['store.evec'])


if __name__ == "__main__":
    unittest.main()
