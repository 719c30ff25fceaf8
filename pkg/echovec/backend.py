#!/usr/bin/env python3
#
# backend.py - part of the echovec embedding tools
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

"""Embedding providers.

A remote backend asks a hidden-state server for the per-token states of
a rendered prompt and pools the last valid token on this side, so the
contract can be tested without a model.  A synthetic backend builds a
seeded two-view world where text and audio share latents but are
pushed apart by a modality offset that in-context exemplars shrink.
"""

import base64
import dataclasses
import enum
import hashlib
import json
import logging
import math
import os
import threading
from pathlib import Path

import numpy as np

from . import _
from . import common
from . import net
from .exception import ConfigurationException, DimMismatch, InvalidInput, ProtocolError
from .prompt import PromptVariant, render_prompt
from .store import EmbeddingStore
from .vectors import EmbeddingVector, HiddenStateSequence, Modality, l2_normalize, \
    last_token_pool

MASK64 = 0xFFFFFFFFFFFFFFFF
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

HIDDEN_STATES_PATH = '/v1/hidden_states'


class BackendKind(enum.Enum):
    REMOTE = 'remote'
    SYNTHETIC = 'synthetic'


@dataclasses.dataclass
class EmbeddingRequest:
    prompt: str
    modality: Modality
    item_id: str
    audio_payload: bytes = None
    variant: PromptVariant = PromptVariant.ONE_WORD

    def __post_init__(self):
        self.modality = Modality.parse(self.modality)
        self.variant = PromptVariant(self.variant)
        if (self.modality is Modality.AUDIO) != (self.audio_payload is not None):
            raise InvalidInput(_("'{item_id}': audio requests need an audio payload, "
                                 "text requests must not have one")
                               .format(item_id=self.item_id))


@dataclasses.dataclass
class BackendConfig:
    kind: BackendKind = BackendKind.SYNTHETIC
    endpoint: str = None
    dim: int = 32
    timeout: float = 60.0
    max_parallel: int = 4
    cache_path: str = None
    seed: int = 0
    latent_dim: int = 8
    icl_blend: float = 0.8
    noise_scale: float = 0.1
    shared_maps: bool = True

    def __post_init__(self):
        self.kind = BackendKind(self.kind)
        if self.kind is BackendKind.REMOTE and not self.endpoint:
            raise ConfigurationException(_("The remote backend needs an endpoint"))
        if self.dim <= 0:
            raise ConfigurationException(_("dim must be positive"))
        if self.max_parallel <= 0:
            raise ConfigurationException(_("max_parallel must be positive"))
        if self.timeout <= 0:
            raise ConfigurationException(_("timeout must be positive"))
        if self.kind is BackendKind.SYNTHETIC:
            if not 0 < self.latent_dim <= self.dim:
                raise ConfigurationException(_("latent_dim must be in 1..dim"))
            if not 0.0 <= self.icl_blend <= 1.0:
                raise ConfigurationException(_("icl_blend must be in [0, 1]"))
            if self.noise_scale < 0:
                raise ConfigurationException(_("noise_scale must not be negative"))
        self.seed &= MASK64

    @classmethod
    def from_config(cls, config):
        return cls(kind=config['backend'], endpoint=config['endpoint'], dim=config['dim'],
                   timeout=config['timeout'], max_parallel=config['max_parallel'],
                   cache_path=config['cache_path'], seed=config['seed'],
                   latent_dim=config['latent_dim'], icl_blend=config['icl_blend'],
                   noise_scale=config['noise_scale'], shared_maps=config['shared_maps'])

    def fingerprint(self):
        """Identify everything that changes the vectors a backend returns."""
        if self.kind is BackendKind.REMOTE:
            fields = ['remote', self.endpoint, self.dim]
        else:
            fields = ['synthetic', self.dim, self.seed, self.latent_dim,
                      repr(self.icl_blend), repr(self.noise_scale), self.shared_maps]
        return hashlib.sha256(json.dumps(fields).encode('utf-8')).hexdigest()


def fnv1a_64(data):
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


class SplitMix64:
    """Portable 64-bit stream, identical on every IEEE-754 platform."""

    def __init__(self, seed):
        self.state = seed & MASK64

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self):
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def gaussian(self, n):
        """n standard normal samples by the Box-Muller transform."""
        out = []
        while len(out) < n:
            u1 = 1.0 - self.uniform()
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            out.append(r * math.cos(2.0 * math.pi * u2))
            out.append(r * math.sin(2.0 * math.pi * u2))
        return np.array(out[:n], dtype=np.float64)


def _stream(seed, label):
    return SplitMix64(seed ^ fnv1a_64(label.encode('utf-8')))


def gram_schmidt(matrix):
    """Orthonormalize the columns of matrix (modified Gram-Schmidt, two passes)."""
    q = np.array(matrix, dtype=np.float64)
    for j in range(q.shape[1]):
        v = q[:, j]
        for _pass in range(2):
            for i in range(j):
                v = v - np.dot(q[:, i], v) * q[:, i]
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise InvalidInput(_("Columns are linearly dependent"))
        q[:, j] = v / norm
    return q


@dataclasses.dataclass
class SyntheticWorld:
    latent_dim: int
    embed_dim: int
    text_map: np.ndarray
    audio_map: np.ndarray
    gap: np.ndarray
    icl_blend: float
    noise_scale: float
    seed: int

    @classmethod
    def create(cls, seed, latent_dim=8, embed_dim=32, icl_blend=0.8, noise_scale=0.1,
               shared_maps=True):
        if not 0 < latent_dim <= embed_dim:
            raise InvalidInput(_("Need 0 < latent_dim <= embed_dim"))
        seed &= MASK64

        def _map(label):
            g = _stream(seed, label).gaussian(embed_dim * latent_dim)
            return gram_schmidt(g.reshape(embed_dim, latent_dim))

        text_map = _map('text-map')
        audio_map = text_map.copy() if shared_maps else _map('audio-map')
        gap = l2_normalize(_stream(seed, 'gap').gaussian(embed_dim))
        return cls(latent_dim, embed_dim, text_map, audio_map, gap,
                   float(icl_blend), float(noise_scale), seed)

    @classmethod
    def from_backend_config(cls, cfg):
        return cls.create(cfg.seed, cfg.latent_dim, cfg.dim, cfg.icl_blend,
                          cfg.noise_scale, cfg.shared_maps)

    def latent(self, item_id):
        return l2_normalize(SplitMix64(fnv1a_64(item_id.encode('utf-8')))
                            .gaussian(self.latent_dim))

    def noise(self, item_id, modality):
        label = 'noise:{seed}:{modality}:{item_id}'.format(
            seed=self.seed, modality=modality.label, item_id=item_id)
        return SplitMix64(fnv1a_64(label.encode('utf-8'))).gaussian(self.embed_dim)


def synthetic_embed(item_id, modality, variant, world):
    """Embed an item in the synthetic two-view world.

    Text and audio views of an item share its latent; a modality offset
    of +g/2 (text) or -g/2 (audio) keeps them apart unless exemplars are
    in the prompt, which blend the offset away by icl_blend.
    """
    modality = Modality.parse(modality)
    variant = PromptVariant(variant)
    z = world.latent(item_id)
    if modality is Modality.TEXT:
        view = world.text_map @ z
        offset = world.gap / 2.0
    else:
        view = world.audio_map @ z
        offset = -world.gap / 2.0
    beta = world.icl_blend if variant.needs_exemplars else 0.0
    values = view + (1.0 - beta) * offset
    if world.noise_scale:
        values = values + world.noise_scale * world.noise(item_id, modality)
    return EmbeddingVector(l2_normalize(values), modality, item_id)


def encode_hidden_states(seq):
    """Wire form of a HiddenStateSequence, as the hidden-state server sends it."""
    return {
        'dim': int(seq.dim),
        'states': seq.states.tolist(),
        'mask': [1 if m else 0 for m in seq.valid_mask],
    }


def decode_hidden_states(data, dim):
    if not isinstance(data, dict) or not {'dim', 'states', 'mask'} <= set(data):
        raise ProtocolError(_("Response lacks dim/states/mask"))
    if not isinstance(data['dim'], int):
        raise ProtocolError(_("Response dim is not an integer"))
    if data['dim'] != dim:
        raise DimMismatch(_("Backend answered with dimension {got}, expected {dim}")
                          .format(got=data['dim'], dim=dim))
    states, mask = data['states'], data['mask']
    if not isinstance(states, list) or len(states) == 0:
        raise ProtocolError(_("Response carries no hidden states"))
    if not isinstance(mask, list) or len(mask) != len(states):
        raise ProtocolError(_("Mask length does not match the number of states"))
    if any(m not in (0, 1) for m in mask):
        raise ProtocolError(_("Mask entries must be 0 or 1"))
    if not any(mask):
        raise ProtocolError(_("Mask marks no valid position"))
    if any(not isinstance(row, list) or len(row) != dim for row in states):
        raise ProtocolError(_("A hidden state does not have {dim} components").format(dim=dim))
    try:
        seq = HiddenStateSequence(np.array(states, dtype=np.float64),
                                  np.array(mask, dtype=bool))
    except (TypeError, ValueError) as e:
        raise ProtocolError(_("Hidden states are not numeric"), str(e)) from e
    if not np.all(np.isfinite(seq.states)):
        raise ProtocolError(_("Hidden states contain non-finite values"))
    return seq


class EmbeddingCache:
    """On-disk embedding cache: one embedding store plus a JSON index.

    Keys are SHA-256 digests of (item id, modality, prompt, audio bytes).
    Writes are serialized through one lock; flush() rewrites both files
    atomically.
    """

    STORE_NAME = 'vectors.evec'
    INDEX_NAME = 'index.json'

    def __init__(self, path, dim, fingerprint):
        self.path = Path(path)
        self.dim = dim
        self.fingerprint = fingerprint
        self._lock = threading.Lock()
        self._dirty = False
        self.store = EmbeddingStore(dim)
        self.index = {}
        store_path = self.path / self.STORE_NAME
        index_path = self.path / self.INDEX_NAME
        if store_path.exists() and index_path.exists():
            with open(index_path, encoding='utf-8') as fp:
                try:
                    index = json.load(fp)
                except ValueError:
                    index = None
            if not isinstance(index, dict):
                logging.warning(_("Cache index '{path}' is unreadable, ignoring the cache")
                                .format(path=index_path))
                return
            if index.get('fingerprint') != fingerprint:
                logging.warning(_("Cache '{path}' was made by another backend setup, ignoring it")
                                .format(path=self.path))
                return
            store = EmbeddingStore.read(store_path)
            if store.dim != dim:
                raise DimMismatch(_("Cache '{path}' holds {got}-d vectors, expected {dim}")
                                  .format(path=self.path, got=store.dim, dim=dim))
            self.store = store
            self.index = index.get('entries', {})
            logging.debug(_("Loaded {n} cached embeddings").format(n=len(store)))

    @staticmethod
    def key(req):
        h = hashlib.sha256()
        for part in (req.item_id.encode('utf-8'), bytes([req.modality.value]),
                     req.prompt.encode('utf-8')):
            h.update(len(part).to_bytes(8, 'little'))
            h.update(part)
        h.update(req.audio_payload or b'')
        return h.hexdigest()

    def get(self, key):
        with self._lock:
            if key in self.store:
                return self.store.get(key).values
        return None

    def put(self, key, vector):
        """Store a vector and return it as the cache will give it back."""
        with self._lock:
            if key not in self.store:
                rounded = vector.values.astype('<f4').astype(np.float64)
                self.store.add(EmbeddingVector(rounded, vector.modality, key))
                self.index[key] = {'item_id': vector.item_id,
                                   'modality': vector.modality.label}
                self._dirty = True
            return self.store.get(key).values

    def flush(self):
        with self._lock:
            if not self._dirty:
                return
            os.makedirs(self.path, exist_ok=True)
            self.store.write(self.path / self.STORE_NAME)
            common.write_atomic(self.path / self.INDEX_NAME, common.dumps_json(
                {'fingerprint': self.fingerprint, 'entries': self.index}))
            self._dirty = False


class Backend:
    def __init__(self, cfg):
        self.cfg = cfg
        self.cache = None
        if cfg.cache_path:
            self.cache = EmbeddingCache(cfg.cache_path, cfg.dim, cfg.fingerprint())

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def close(self):
        if self.cache is not None:
            self.cache.flush()

    def _embed(self, req):
        raise NotImplementedError

    def embed(self, req):
        key = None
        if self.cache is not None:
            key = EmbeddingCache.key(req)
            hit = self.cache.get(key)
            if hit is not None:
                return EmbeddingVector(hit, req.modality, req.item_id)
        vector = self._embed(req)
        if vector.dim != self.cfg.dim:
            raise DimMismatch(_("'{item_id}' came back with dimension {got}, expected {dim}")
                              .format(item_id=req.item_id, got=vector.dim, dim=self.cfg.dim))
        if key is not None:
            vector = EmbeddingVector(self.cache.put(key, vector), req.modality, req.item_id)
        return vector

    def embed_many(self, requests):
        """Embed requests with bounded parallelism, results in input order."""
        vectors = common.ordered_map(self.embed, requests, self.cfg.max_parallel)
        if self.cache is not None:
            self.cache.flush()
        return vectors


class SyntheticBackend(Backend):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.world = SyntheticWorld.from_backend_config(cfg)

    def _embed(self, req):
        return synthetic_embed(req.item_id, req.modality, req.variant, self.world)


class RemoteBackend(Backend):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.url = cfg.endpoint.rstrip('/') + HIDDEN_STATES_PATH
        self._slots = threading.BoundedSemaphore(cfg.max_parallel)
        self._local = threading.local()

    @property
    def session(self):
        if not hasattr(self._local, 'session'):
            self._local.session = net.make_session()
        return self._local.session

    def _embed(self, req):
        payload = {
            'prompt': req.prompt,
            'audio_b64': (base64.b64encode(req.audio_payload).decode('ascii')
                          if req.audio_payload is not None else None),
        }
        with self._slots:
            data = net.post_json(self.session, self.url, payload, self.cfg.timeout)
        seq = decode_hidden_states(data, self.cfg.dim)
        return last_token_pool(seq, req.item_id, req.modality)


def make_backend(cfg):
    if cfg.kind is BackendKind.REMOTE:
        return RemoteBackend(cfg)
    return SyntheticBackend(cfg)


def embed(req, cfg):
    """Embed a single request with a backend built from cfg."""
    with make_backend(cfg) as backend:
        return backend.embed(req)


@dataclasses.dataclass
class Item:
    """Something to embed: a caption, or an audio clip with its reference."""

    item_id: str
    modality: Modality
    content: str
    audio_payload: bytes = None

    def __post_init__(self):
        self.modality = Modality.parse(self.modality)


def build_requests(items, variant, exemplars=None, audio_exemplars_as='caption'):
    variant = PromptVariant(variant)
    requests = []
    for item in items:
        prompt = render_prompt(item.content, item.modality, variant, exemplars,
                               audio_exemplars_as)
        payload = None
        if item.modality is Modality.AUDIO:
            payload = item.audio_payload
            if payload is None:
                payload = item.content.encode('utf-8')
        requests.append(EmbeddingRequest(prompt, item.modality, item.item_id, payload, variant))
    return requests


def embed_items(backend, items, variant, exemplars=None, audio_exemplars_as='caption'):
    return backend.embed_many(build_requests(items, variant, exemplars, audio_exemplars_as))


def _item_from_record(obj):
    if 'id' in obj:
        item_id = obj['id']
        modality = Modality.parse(obj.get('modality', 'text'))
        content = obj['content']
    elif 'paragraph' in obj:
        item_id, modality, content = obj['clip_id'], Modality.TEXT, obj['paragraph']
    elif 'instruction' in obj:
        item_id, modality, content = obj['mix_id'], Modality.TEXT, obj['instruction']
    else:
        raise KeyError('id')
    if not isinstance(item_id, str) or not isinstance(content, str):
        raise TypeError('id and content must be strings')
    payload = None
    if obj.get('audio'):
        with open(obj['audio'], 'rb') as fp:
            payload = fp.read()
    return Item(item_id, modality, content, payload)


def load_items(path):
    """Read items from JSON Lines.

    Each line is {"id", "modality", "content", "audio"?}; "audio" names a
    file whose bytes become the payload.  Long-caption records
    ({"clip_id", "paragraph"}) and conditional records ({"mix_id",
    "instruction"}) are read as text items.
    """
    items = []
    for lineno, obj in common.read_jsonl(path):
        try:
            items.append(_item_from_record(obj))
        except (KeyError, TypeError) as e:
            raise InvalidInput(_("{path}: line {lineno}: not an item ({error})")
                               .format(path=path, lineno=lineno, error=e)) from e
        except InvalidInput as e:
            raise InvalidInput(_("{path}: line {lineno}: {error}")
                               .format(path=path, lineno=lineno, error=e.value)) from e
    return items
