#!/usr/bin/env python3
#
# retrieval.py - part of the echovec embedding tools
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

"""Exact cosine retrieval, Recall@K, the modality gap and PCA projection."""

import csv
import dataclasses
import enum
import io
import json
import logging

import numpy as np

from . import _
from . import common
from .exception import DimMismatch, InvalidInput, InvalidRelevance
from .vectors import EmbeddingVector, as_matrix, as_vector, normalize_rows

PCA_TOLERANCE = 1e-9
PCA_MAX_ITERATIONS = 1000


class Direction(enum.Enum):
    TEXT_TO_AUDIO = 'TextToAudio'
    AUDIO_TO_TEXT = 'AudioToText'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {
            'texttoaudio': cls.TEXT_TO_AUDIO, 'text-to-audio': cls.TEXT_TO_AUDIO,
            'audiototext': cls.AUDIO_TO_TEXT, 'audio-to-text': cls.AUDIO_TO_TEXT,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise InvalidInput(_("Unknown direction {value!r}").format(value=value)) from None


@dataclasses.dataclass
class RetrievalCorpus:
    """A searchable store and, for each query id, the ids relevant to it."""

    store: object
    relevance: dict

    def __post_init__(self):
        relevance = {}
        for query_id, targets in self.relevance.items():
            targets = {targets} if isinstance(targets, str) else set(targets)
            if not targets:
                raise InvalidRelevance(_("Query '{query}' has no relevant item")
                                       .format(query=query_id))
            missing = sorted(t for t in targets if t not in self.store)
            if missing:
                raise InvalidRelevance(_("Query '{query}' points at unknown items: {ids}")
                                       .format(query=query_id, ids=', '.join(missing[:5])))
            relevance[query_id] = targets
        self.relevance = relevance


@dataclasses.dataclass
class EvalReport:
    direction: Direction
    recall: dict
    n_queries: int
    config_label: str = ''

    def to_dict(self):
        return {
            'direction': self.direction.value,
            'recall': {str(k): v for k, v in sorted(self.recall.items())},
            'n_queries': self.n_queries,
            'config_label': self.config_label,
        }


@dataclasses.dataclass
class GapReport:
    gap: float
    n_text: int
    n_audio: int

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class PcaProjection:
    coordinates: np.ndarray
    explained: list
    rank: int


def invert_relevance(relevance):
    """Turn a text -> audio relevance map into the audio -> text one."""
    inverted = {}
    for query_id, targets in relevance.items():
        targets = [targets] if isinstance(targets, str) else targets
        for target in targets:
            inverted.setdefault(target, set()).add(query_id)
    return inverted


def load_relevance(path):
    """Read a JSON object mapping each text id to its relevant audio ids."""
    with open(path, encoding='utf-8') as fp:
        try:
            data = json.load(fp)
        except ValueError as e:
            raise InvalidRelevance(_("'{path}' is not valid JSON").format(path=path),
                                   str(e)) from e
    if not isinstance(data, dict):
        raise InvalidRelevance(_("'{path}' must hold a JSON object").format(path=path))
    relevance = {}
    for query_id, targets in data.items():
        if isinstance(targets, str):
            targets = [targets]
        if not isinstance(targets, list) or not all(isinstance(t, str) for t in targets):
            raise InvalidRelevance(_("Relevance of '{query}' must be a list of ids")
                                   .format(query=query_id))
        relevance[query_id] = set(targets)
    return relevance


def _unit_matrix(store):
    return normalize_rows(store.matrix())


def _scores(query_unit, corpus_unit):
    # row-wise reduction, so identical corpus rows get identical scores
    return np.clip((corpus_unit * query_unit).sum(axis=1), -1.0, 1.0)


def _ranking(scores, ids):
    # descending score, ascending item id on ties
    return np.lexsort((ids, -scores))


def _query_unit(query, dim):
    values = query.values if isinstance(query, EmbeddingVector) else as_vector(query)
    if values.shape[0] != dim:
        raise DimMismatch(_("Query has dimension {got}, corpus has {dim}")
                          .format(got=values.shape[0], dim=dim))
    return normalize_rows(values[None, :])[0]


def top_k(query, corpus, k):
    """The k corpus items most similar to query, as (item_id, cosine) pairs."""
    if len(corpus) == 0:
        raise InvalidInput(_("Cannot search an empty corpus"))
    if k < 1:
        raise InvalidInput(_("k must be at least 1"))
    scores = _scores(_query_unit(query, corpus.dim), _unit_matrix(corpus))
    ids = np.array(corpus.ids)
    order = _ranking(scores, ids)[:k]
    return [(str(ids[i]), float(scores[i])) for i in order]


def recall_at_k(queries, corpus, ks=(1, 5, 10), direction=Direction.TEXT_TO_AUDIO,
                multi_reference=True, config_label=''):
    """Recall@K of every query in the queries store against a RetrievalCorpus.

    With multi_reference a query counts as a hit when any of its relevant
    items is in the top K.  Otherwise every (query, relevant item) pair
    is scored on its own and the hits are averaged over pairs.
    """
    direction = Direction.parse(direction)
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise InvalidInput(_("K values must be positive"))
    if len(corpus.store) == 0:
        raise InvalidInput(_("Cannot search an empty corpus"))
    if queries.dim != corpus.store.dim:
        raise DimMismatch(_("Query store has dimension {q}, corpus store {c}")
                          .format(q=queries.dim, c=corpus.store.dim))
    unknown = sorted(q for q in corpus.relevance if q not in queries)
    if unknown:
        raise InvalidRelevance(_("Relevance names queries missing from the store: {ids}")
                               .format(ids=', '.join(unknown[:5])))
    query_ids = [q for q in queries.ids if q in corpus.relevance]
    if not query_ids:
        raise InvalidRelevance(_("No query has relevance judgements"))
    skipped = len(queries) - len(query_ids)
    if skipped:
        logging.warning(_("{n} queries have no relevance judgements and are skipped")
                        .format(n=skipped))

    corpus_unit = _unit_matrix(corpus.store)
    ids = np.array(corpus.store.ids)
    position = {item_id: i for i, item_id in enumerate(corpus.store.ids)}
    hits = {k: 0 for k in ks}
    total = 0
    for query_id in query_ids:
        scores = _scores(_query_unit(queries.get(query_id), corpus.store.dim), corpus_unit)
        ranks = np.empty(len(ids), dtype=np.int64)
        ranks[_ranking(scores, ids)] = np.arange(len(ids))
        relevant = [ranks[position[t]] for t in sorted(corpus.relevance[query_id])]
        if multi_reference:
            best = min(relevant)
            for k in ks:
                hits[k] += int(best < k)
            total += 1
        else:
            for rank in relevant:
                for k in ks:
                    hits[k] += int(rank < k)
            total += len(relevant)
    recall = {k: hits[k] / total for k in ks}
    return EvalReport(direction, recall, len(query_ids), config_label)


def modality_gap(text, audio):
    """Distance between the centroids of the normalized text and audio clouds, x100."""
    if len(text) == 0 or len(audio) == 0:
        raise InvalidInput(_("Both modalities need at least one vector"))
    t = as_matrix(text)
    a = as_matrix(audio)
    if t.shape[1] != a.shape[1]:
        raise DimMismatch(_("Text vectors have dimension {t}, audio vectors {a}")
                          .format(t=t.shape[1], a=a.shape[1]))
    diff = normalize_rows(t).mean(axis=0) - normalize_rows(a).mean(axis=0)
    return GapReport(100.0 * float(np.linalg.norm(diff)), t.shape[0], a.shape[0])


def _power_iteration(cov, start):
    v = start / np.linalg.norm(start)
    for _i in range(PCA_MAX_ITERATIONS):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w = w / norm
        if np.linalg.norm(w - v) < PCA_TOLERANCE:
            v = w
            break
        v = w
    else:
        logging.debug('power iteration stopped after %d iterations', PCA_MAX_ITERATIONS)
    return v, float(v @ cov @ v)


def pca_project(vectors, out_dims=2):
    """Project vectors on their top principal directions.

    Power iteration with deflation on the 1/n covariance, seeded so the
    result is reproducible.  Each direction is signed so that its
    largest-magnitude loading is positive.  When the data has rank below
    out_dims the missing coordinates are zero and the projection reports
    the rank it reached.
    """
    x = as_matrix(vectors)
    if out_dims < 1:
        raise InvalidInput(_("out_dims must be at least 1"))
    if x.shape[0] < out_dims + 1:
        raise InvalidInput(_("PCA to {k} dimensions needs at least {n} vectors")
                           .format(k=out_dims, n=out_dims + 1))
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    total = float(np.trace(cov))
    rng = np.random.default_rng(0)
    coordinates = np.zeros((x.shape[0], out_dims))
    explained = [0.0] * out_dims
    rank = 0
    residual = cov.copy()
    for c in range(out_dims):
        start = rng.standard_normal(x.shape[1])
        if total <= 0.0:
            break
        v, eigenvalue = _power_iteration(residual, start)
        if eigenvalue <= PCA_TOLERANCE * total:
            break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        coordinates[:, c] = centered @ v
        explained[c] = eigenvalue / total
        residual = residual - eigenvalue * np.outer(v, v)
        rank += 1
    if rank < out_dims:
        logging.info(_("Data has rank {rank}, padding {n} coordinates with zeros")
                     .format(rank=rank, n=out_dims - rank))
    return PcaProjection(coordinates, explained, rank)


def pca_csv(ids, modalities, coordinates):
    """CSV text with item_id, modality and one column per coordinate (x, y in 2-D)."""
    dims = coordinates.shape[1]
    names = ['x', 'y'] if dims == 2 else ['pc{i}'.format(i=i + 1) for i in range(dims)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['item_id', 'modality'] + names)
    for item_id, modality, row in zip(ids, modalities, coordinates):
        writer.writerow([item_id, modality.label] + [repr(float(v)) for v in row])
    return buf.getvalue()


def reports_json(reports):
    return common.dumps_json([r.to_dict() for r in reports])
