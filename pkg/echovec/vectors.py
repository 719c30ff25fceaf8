#!/usr/bin/env python3
#
# vectors.py - part of the echovec embedding tools
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

"""Vector primitives shared by every other module.

All similarity math is done in double precision.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import _
from .exception import DegenerateVector, DimMismatch, InvalidInput


class Modality(enum.Enum):
    # values are the on-disk tag bytes of the store format
    TEXT = 0
    AUDIO = 1

    @property
    def label(self):
        return 'Text' if self is Modality.TEXT else 'Audio'

    @classmethod
    def parse(cls, value):
        """Accept a Modality, its label or its tag byte."""
        if isinstance(value, cls):
            return value
        if isinstance(value, int) and not isinstance(value, bool):
            try:
                return cls(value)
            except ValueError:
                pass
        elif isinstance(value, str):
            lowered = value.strip().lower()
            if lowered == 'text':
                return cls.TEXT
            if lowered == 'audio':
                return cls.AUDIO
        raise InvalidInput(_("Unknown modality {value!r}").format(value=value))


def as_vector(values):
    """Return values as a 1-D float64 array, checking it is usable."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise InvalidInput(_("A vector must be one-dimensional and non-empty"))
    if not np.all(np.isfinite(v)):
        raise InvalidInput(_("Vector has non-finite components"))
    return v


@dataclass
class EmbeddingVector:
    values: np.ndarray
    modality: Modality = Modality.TEXT
    item_id: str = ''

    def __post_init__(self):
        self.values = as_vector(self.values)
        self.modality = Modality.parse(self.modality)

    @property
    def dim(self):
        return self.values.shape[0]


@dataclass
class HiddenStateSequence:
    """Per-token hidden states of one prompt, with its padding mask."""

    states: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.states.ndim != 2 or self.states.shape[0] == 0 or self.states.shape[1] == 0:
            raise InvalidInput(_("Hidden states must be a non-empty T x d matrix"))
        if self.valid_mask.shape != (self.states.shape[0],):
            raise InvalidInput(_("Mask length {mask} does not match {length} states")
                               .format(mask=self.valid_mask.shape[0] if self.valid_mask.ndim else 0,
                                       length=self.states.shape[0]))

    @property
    def dim(self):
        return self.states.shape[1]


def _values(v):
    if isinstance(v, EmbeddingVector):
        return v.values
    return as_vector(v)


def last_token_pool(seq, item_id='', modality=Modality.TEXT):
    """Take the hidden state of the last valid (non-padding) position.

    Backends report masks with right padding, so the greatest valid
    index is the final token the model actually saw.
    """
    valid = np.flatnonzero(seq.valid_mask)
    if valid.size == 0:
        raise InvalidInput(_("Hidden state mask has no valid position"))
    return EmbeddingVector(seq.states[valid[-1]].copy(), modality, item_id)


def _rescaled(v):
    # divide by max |v| first, so the norm neither overflows nor underflows
    scale = np.max(np.abs(v)) if v.size else 0.0
    if scale == 0.0:
        return None
    return v / scale


def l2_normalize(v):
    w = _rescaled(_values(v))
    if w is None:
        raise DegenerateVector(_("Cannot normalize a zero vector"))
    return w / np.linalg.norm(w)


def cosine(a, b):
    a = _values(a)
    b = _values(b)
    if a.shape != b.shape:
        raise DimMismatch(_("Dimension mismatch: {a} != {b}")
                          .format(a=a.shape[0], b=b.shape[0]))
    a = _rescaled(a)
    b = _rescaled(b)
    if a is None or b is None:
        raise DegenerateVector(_("Cosine of a zero vector is undefined"))
    return float(np.clip(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def centroid(vectors):
    if len(vectors) == 0:
        raise InvalidInput(_("Centroid of an empty set is undefined"))
    return np.mean(as_matrix(vectors), axis=0)


def as_matrix(vectors):
    """Stack vectors (arrays or EmbeddingVectors) into an n x d float64 matrix."""
    rows = [_values(v) for v in vectors]
    dims = {r.shape[0] for r in rows}
    if len(dims) > 1:
        raise DimMismatch(_("Vectors of different dimensions: {dims}")
                          .format(dims=sorted(dims)))
    return np.vstack(rows) if rows else np.zeros((0, 0))


def normalize_rows(matrix):
    """Normalize every row of a matrix, refusing zero rows."""
    scales = np.max(np.abs(matrix), axis=1) if matrix.size else np.zeros(matrix.shape[0])
    if np.any(scales == 0.0):
        raise DegenerateVector(_("Cannot normalize a zero vector"))
    scaled = matrix / scales[:, None]
    return scaled / np.linalg.norm(scaled, axis=1)[:, None]

