#!/usr/bin/env python3

import json
import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))
from testcommon import TmpCwd, run_cli, write_jsonl  # NOQA: E402

from echovec.benchmark import PcmAudio, write_wav  # NOQA: E402
from echovec.store import EmbeddingStore  # NOQA: E402
from echovec.train import AdapterParams  # NOQA: E402
from echovec.vectors import EmbeddingVector, Modality  # NOQA: E402


def _read(path, mode='r'):
    with open(path, mode) as fp:
        return fp.read()


class CliTest(unittest.TestCase):
    '''echovec/__main__.py and the subcommands'''

    def setUp(self):
        self._td = tempfile.TemporaryDirectory()
        self.testdir = self._td.name
        self._cwd = TmpCwd(self.testdir)
        self._cwd.__enter__()

    def tearDown(self):
        self._cwd.__exit__(None, None, None)
        self._td.cleanup()

    def _items(self):
        rows = []
        for i in range(6):
            rows.append({'id': 'c{}'.format(i), 'modality': 'text',
                         'content': 'a recording of c{}'.format(i)})
            rows.append({'id': 'c{}'.format(i), 'modality': 'audio', 'content': 'c{}'.format(i)})
        write_jsonl('items.jsonl', rows)
        return 'items.jsonl'

    def _identity_stores(self):
        vectors = np.eye(4)
        EmbeddingStore(4, [EmbeddingVector(v, Modality.TEXT, 't{}'.format(i))
                           for i, v in enumerate(vectors)]).write('text.evec')
        EmbeddingStore(4, [EmbeddingVector(v, Modality.AUDIO, 'a{}'.format(i))
                           for i, v in enumerate(vectors)]).write('audio.evec')
        with open('rel.json', 'w') as fp:
            json.dump({'t{}'.format(i): ['a{}'.format(i)] for i in range(4)}, fp)

    def test_usage_errors(self):
        self.assertEqual(run_cli(), 0)
        self.assertEqual(run_cli('frobnicate'), 2)
        self.assertEqual(run_cli('gap', '--no-such-flag'), 2)
        self.assertEqual(run_cli('gap', '-v', '-q', 'x.evec'), 2)

    def test_unknown_config_key(self):
        with open('bad.json', 'w') as fp:
            json.dump({'bogus': 1}, fp)
        self._items()
        self.assertEqual(run_cli('embed', '--config', 'bad.json', 'items.jsonl', '-o', 'x.evec'),
                         2)
        self.assertFalse(os.path.exists('x.evec'))

    def test_config_type_error(self):
        with open('bad.json', 'w') as fp:
            json.dump({'dim': 'large'}, fp)
        self._items()
        self.assertEqual(run_cli('embed', '--config', 'bad.json', 'items.jsonl', '-o', 'x.evec'),
                         2)

    def test_embed_is_deterministic(self):
        items = self._items()
        for out in ('a.evec', 'b.evec'):
            self.assertEqual(run_cli('embed', items, '-o', out, '--dim', '16',
                                     '--modality', 'text'), 0)
        self.assertEqual(_read('a.evec', 'rb'), _read('b.evec', 'rb'))
        store = EmbeddingStore.read('a.evec')
        self.assertEqual(len(store), 6)
        self.assertEqual(store.dim, 16)
        self.assertEqual({r.modality for r in store}, {Modality.TEXT})

    def test_embed_paired_items_needs_modality(self):
        items = self._items()
        self.assertEqual(run_cli('embed', items, '-o', 'a.evec'), 4)
        self.assertFalse(os.path.exists('a.evec'))

    def test_embed_then_eval(self):
        items = self._items()
        self.assertEqual(run_cli('embed', items, '-o', 'text.evec', '--modality', 'text'), 0)
        self.assertEqual(run_cli('embed', items, '-o', 'audio.evec', '--modality', 'audio'),
                         0)
        self.assertEqual(len(EmbeddingStore.read('audio.evec')), 6)
        with open('rel.json', 'w') as fp:
            json.dump({'c{}'.format(i): ['c{}'.format(i)] for i in range(6)}, fp)
        self.assertEqual(run_cli('eval', 'text.evec', 'audio.evec', 'rel.json', '-o', 'e.json'),
                         0)
        reports = json.loads(_read('e.json'))
        self.assertEqual([r['direction'] for r in reports], ['TextToAudio', 'AudioToText'])

    def test_embed_missing_input(self):
        self.assertEqual(run_cli('embed', 'nothing.jsonl', '-o', 'a.evec'), 4)
        self.assertFalse(os.path.exists('a.evec'))

    def test_embed_with_cache(self):
        items = self._items()
        self.assertEqual(run_cli('embed', items, '-o', 'a.evec', '--cache', 'cache',
                                 '--modality', 'audio'), 0)
        self.assertTrue(os.path.isdir('cache'))
        self.assertEqual(run_cli('embed', items, '-o', 'b.evec', '--cache', 'cache',
                                 '--modality', 'audio'), 0)
        self.assertEqual(_read('a.evec', 'rb'), _read('b.evec', 'rb'))

    def test_remote_without_endpoint(self):
        items = self._items()
        self.assertEqual(run_cli('embed', items, '-o', 'a.evec', '--backend', 'remote'), 2)

    def test_train_zero_learning_rate(self):
        write_jsonl('triplets.jsonl', [{'anchor': 'a{}'.format(i), 'positive': 'p{}'.format(i),
                                        'negative': 'n{}'.format(i)} for i in range(10)])
        code = run_cli('train', 'triplets.jsonl', '--adapter', 'adapter.evec', '--dim', '8',
                       '--learning-rate', '0', '--seed', '3', '--epochs', '2', '-o', 'r.json')
        self.assertEqual(code, 0)
        params = AdapterParams.read('adapter.evec')
        initial = AdapterParams.initial(8, 3)
        np.testing.assert_array_equal(params.W, initial.W.astype(np.float32).astype(np.float64))
        report = json.loads(_read('r.json'))
        self.assertEqual(report['steps'], 2)
        self.assertEqual(report['dim'], 8)

    def test_train_names_malformed_line(self):
        rows = [{'anchor': 'a{}'.format(i), 'positive': 'p{}'.format(i),
                 'negative': 'n{}'.format(i)} for i in range(6)]
        write_jsonl('triplets.jsonl', rows + ['{"anchor": "a"'])
        with self.assertLogs(level='CRITICAL') as cm:
            code = run_cli('train', 'triplets.jsonl', '--adapter', 'adapter.evec')
        self.assertEqual(code, 4)
        self.assertIn('line 7', '\n'.join(cm.output))
        self.assertFalse(os.path.exists('adapter.evec'))

    def test_eval_identity(self):
        self._identity_stores()
        self.assertEqual(run_cli('eval', 'text.evec', 'audio.evec', 'rel.json', '-o', 'e.json'),
                         0)
        reports = json.loads(_read('e.json'))
        self.assertEqual([r['direction'] for r in reports], ['TextToAudio', 'AudioToText'])
        for report in reports:
            self.assertEqual(report['recall'], {'1': 1.0, '5': 1.0, '10': 1.0})

    def test_eval_options(self):
        self._identity_stores()
        code = run_cli('eval', 'text.evec', 'audio.evec', 'rel.json', '--k', '2,1',
                       '--direction', 'audio-to-text', '--label', 'identity', '-o', 'e.json')
        self.assertEqual(code, 0)
        reports = json.loads(_read('e.json'))
        self.assertEqual(len(reports), 1)
        self.assertEqual(sorted(reports[0]['recall']), ['1', '2'])
        self.assertEqual(reports[0]['config_label'], 'identity')
        self.assertEqual(run_cli('eval', 'text.evec', 'audio.evec', 'rel.json', '--k', 'x'), 2)

    def test_eval_dim_mismatch(self):
        self._identity_stores()
        EmbeddingStore(3, [EmbeddingVector([1.0, 0.0, 0.0], Modality.AUDIO, 'a0')]).write(
            'audio.evec')
        self.assertEqual(run_cli('eval', 'text.evec', 'audio.evec', 'rel.json'), 2)

    def test_eval_bad_store(self):
        self._identity_stores()
        with open('audio.evec', 'wb') as fp:
            fp.write(b'garbage')
        self.assertEqual(run_cli('eval', 'text.evec', 'audio.evec', 'rel.json'), 4)

    def test_ablate(self):
        code = run_cli('ablate', '--synthetic-items', '20', '--dim', '16', '--format', 'json',
                       '-o', 'table.json')
        self.assertEqual(code, 0)
        table = json.loads(_read('table.json'))
        self.assertEqual(len(table['rows']), 5)
        self.assertIn('note', table)
        self.assertEqual(run_cli('ablate', '--synthetic-items', '20', '--dim', '16',
                                 '-o', 'table.txt'), 0)
        self.assertTrue(_read('table.txt').startswith('Configuration'))

    def test_ablate_items_need_relevance(self):
        items = self._items()
        self.assertEqual(run_cli('ablate', '--items', items), 2)

    def test_gap(self):
        vectors = [EmbeddingVector([1.0, 2.0], Modality.TEXT, 't'),
                   EmbeddingVector([1.0, 2.0], Modality.AUDIO, 'a')]
        EmbeddingStore(2, vectors).write('both.evec')
        self.assertEqual(run_cli('gap', 'both.evec', '-o', 'gap.json'), 0)
        self.assertEqual(json.loads(_read('gap.json'))['gap'], 0.0)
        self._identity_stores()
        self.assertEqual(run_cli('gap', 'text.evec', 'audio.evec', '-o', 'gap.json'), 0)
        self.assertEqual(json.loads(_read('gap.json'))['n_text'], 4)

    def test_pca(self):
        self._identity_stores()
        code = run_cli('pca', 'text.evec', 'audio.evec', '--explained', 'explained.json',
                       '-o', 'pca.csv')
        self.assertEqual(code, 0)
        lines = _read('pca.csv').splitlines()
        self.assertEqual(lines[0], 'item_id,modality,x,y')
        self.assertEqual(len(lines), 9)
        explained = json.loads(_read('explained.json'))
        self.assertEqual(len(explained['explained']), 2)
        self.assertEqual(explained['rank'], 2)

    def test_build_long(self):
        with open('captions.csv', 'w') as fp:
            fp.write('clip_id,caption_1,caption_2,caption_3,caption_4,caption_5\n')
            for i in range(3):
                fp.write('c{},A dog barks,Rain falls,A car passes,Wind blows,People talk\n'
                         .format(i))
        self.assertEqual(run_cli('build-long', 'captions.csv', '-o', 'a.jsonl', '--stats',
                                 'stats.json'), 0)
        self.assertEqual(run_cli('build-long', 'captions.csv', '-o', 'b.jsonl'), 0)
        self.assertEqual(_read('a.jsonl'), _read('b.jsonl'))
        records = [json.loads(line) for line in _read('a.jsonl').splitlines()]
        self.assertEqual([r['clip_id'] for r in records], ['c0', 'c1', 'c2'])
        self.assertEqual(json.loads(_read('stats.json'))['count'], 3)

    def test_build_conditional(self):
        os.mkdir('wavs')
        with open('labels.csv', 'w') as fp:
            fp.write('clip_id,label,wav_path\n')
            for i in range(8):
                samples = 0.5 * np.sin(np.arange(80) * (i + 1) / 10.0)
                write_wav(os.path.join('wavs', 'c{}.wav'.format(i)), PcmAudio(samples, 8000))
                fp.write('c{i},label {i},wavs/c{i}.wav\n'.format(i=i))
        args = ('build-conditional', 'labels.csv', '-n', '2', '--seed', '4')
        self.assertEqual(run_cli(*args, '-o', 'a.jsonl', '--audio-dir', 'mixes'), 0)
        self.assertEqual(run_cli(*args, '-o', 'b.jsonl', '--audio-dir', 'mixes2'), 0)
        self.assertEqual(_read('a.jsonl'), _read('b.jsonl'))
        self.assertEqual(_read(os.path.join('mixes', 'mix-00000.wav'), 'rb'),
                         _read(os.path.join('mixes2', 'mix-00000.wav'), 'rb'))
        records = [json.loads(line) for line in _read('a.jsonl').splitlines()]
        self.assertEqual(len(records), 2)
        self.assertAlmostEqual(records[0]['manifest']['duration'], 0.01)
        self.assertEqual(run_cli(*args[:3], '3'), 4)

    def test_exemplars(self):
        write_jsonl('candidates.jsonl', [
            {'id': 't1', 'modality': 'text', 'caption': 'a dog barks loudly'},
            {'id': 't2', 'modality': 'text', 'caption': 'rain falls on a roof'},
            {'id': 't3', 'modality': 'text', 'caption': 'wind blows through trees'},
            {'id': 'a1', 'modality': 'audio', 'caption': 'an engine idles'},
        ])
        code = run_cli('exemplars', 'candidates.jsonl', '--budget-text', '2', '--budget-audio',
                       '1', '-o', 'ex.json')
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists('ex.json'))
        self.assertEqual(run_cli('exemplars', 'candidates.jsonl', '--budget-text', '5',
                                 '--budget-audio', '1'), 4)


if __name__ == "__main__":
    unittest.main()
