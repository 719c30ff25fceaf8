#!/usr/bin/env python3
#
# train.py - part of the echovec embedding tools
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

"""Text-only contrastive training of an affine adapter.

Base embeddings stay frozen; only ``h = W e + b`` is learned, and the
same adapter is applied to audio embeddings at retrieval time.
"""

import base64
import dataclasses
import logging
from argparse import ArgumentParser

import numpy as np

from . import _
from . import common
from .backend import BackendConfig, Item, embed_items, make_backend
from .exception import DegenerateVector, DimMismatch, FormatMismatch, InvalidConfig, \
    InvalidInput, TrainingDiverged
from .prompt import PromptVariant, load_exemplars
from .store import EmbeddingStore
from .vectors import EmbeddingVector, Modality, as_matrix

config = None
options = None

INIT_SCALE = 1e-3
SEED_MASK = 0xFFFFFFFFFFFFFFFF


@dataclasses.dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str

    def __post_init__(self):
        members = (self.anchor, self.positive, self.negative)
        if not all(isinstance(m, str) and m for m in members):
            raise InvalidInput(_("Triplet members must be non-empty strings"))
        if len(set(members)) != 3:
            raise InvalidInput(_("Triplet members must be distinct: {anchor!r}")
                               .format(anchor=self.anchor))


@dataclasses.dataclass
class AdapterParams:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64)
        self.b = np.array(self.b, dtype=np.float64)
        d = self.b.shape[0] if self.b.ndim == 1 else -1
        if self.W.shape != (d, d):
            raise InvalidInput(_("Adapter needs a d x d matrix and a d vector"))
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise InvalidInput(_("Adapter has non-finite entries"))

    @property
    def dim(self):
        return self.b.shape[0]

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def initial(cls, dim, seed):
        """Near-identity start, W = I + 1e-3 G with G seeded standard normal."""
        rng = np.random.default_rng([seed & SEED_MASK, 0])
        return cls(np.eye(dim) + INIT_SCALE * rng.standard_normal((dim, dim)), np.zeros(dim))

    def to_store(self):
        records = [EmbeddingVector(row, Modality.TEXT, 'W:row:{k}'.format(k=k))
                   for k, row in enumerate(self.W)]
        records.append(EmbeddingVector(self.b, Modality.TEXT, 'b'))
        return EmbeddingStore(self.dim, records)

    @classmethod
    def from_store(cls, store):
        expected = ['W:row:{k}'.format(k=k) for k in range(store.dim)] + ['b']
        if sorted(store.ids) != sorted(expected):
            raise FormatMismatch(_("Store does not hold adapter parameters"))
        W = np.vstack([store.get(i).values for i in expected[:-1]])
        return cls(W, store.get('b').values)

    def to_base64(self):
        return base64.b64encode(self.to_store().to_bytes()).decode('ascii')

    @classmethod
    def from_base64(cls, text):
        return cls.from_store(EmbeddingStore.from_bytes(base64.b64decode(text)))

    def write(self, path):
        self.to_store().write(path)

    @classmethod
    def read(cls, path):
        return cls.from_store(EmbeddingStore.read(path))


@dataclasses.dataclass
class TrainConfig:
    tau: float = 0.05
    batch_size: int = 16
    epochs: int = 1
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = 'adam'
    exclude_self_negative: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfig(_("tau must be positive"))
        if self.batch_size < 1:
            raise InvalidConfig(_("batch_size must be at least 1"))
        if self.epochs < 0:
            raise InvalidConfig(_("epochs must not be negative"))
        if self.learning_rate < 0:
            raise InvalidConfig(_("learning_rate must not be negative"))
        if self.optimizer not in ('sgd', 'adam'):
            raise InvalidConfig(_("Unknown optimizer {name!r}").format(name=self.optimizer))

    @classmethod
    def from_config(cls, config):
        return cls(tau=config['tau'], batch_size=config['batch_size'], epochs=config['epochs'],
                   learning_rate=config['learning_rate'], seed=config['seed'],
                   optimizer=config['optimizer'],
                   exclude_self_negative=config['exclude_self_negative'])


@dataclasses.dataclass
class TrainReport:
    loss_curve: list
    final_params: AdapterParams
    steps: int

    def to_dict(self):
        return {
            'loss_curve': [float(v) for v in self.loss_curve],
            'steps': self.steps,
            'dim': self.final_params.dim,
            'adapter': self.final_params.to_base64(),
        }

    def to_json(self):
        return common.dumps_json(self.to_dict())


def apply_adapter(e, params):
    """Return W e + b with the modality tag and id of e."""
    if e.dim != params.dim:
        raise DimMismatch(_("Embedding has dimension {got}, adapter expects {dim}")
                          .format(got=e.dim, dim=params.dim))
    return EmbeddingVector(params.W @ e.values + params.b, e.modality, e.item_id)


def apply_adapter_matrix(matrix, params):
    """Row-wise apply_adapter on an n x d matrix."""
    return matrix @ params.W.T + params.b


def _normalize(matrix):
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVector(_("Contrastive batch contains a zero vector"))
    return matrix / norms[:, None], norms


def _batch(anchors, positives, negatives):
    h = as_matrix(anchors)
    p = as_matrix(positives)
    q = as_matrix(negatives)
    if not (h.shape == p.shape == q.shape) or h.shape[0] == 0:
        raise DimMismatch(_("Anchors, positives and negatives must be N x d alike, N >= 1"))
    return h, p, q


def _softmax_terms(hn, pn, qn, tau, exclude_self):
    pos = hn @ pn.T / tau
    neg = hn @ qn.T / tau
    if exclude_self:
        np.fill_diagonal(neg, -np.inf)
    top = np.maximum(pos.max(axis=1), neg.max(axis=1))
    e_pos = np.exp(pos - top[:, None])
    e_neg = np.exp(neg - top[:, None])
    z = e_pos.sum(axis=1) + e_neg.sum(axis=1)
    log_z = top + np.log(z)
    losses = log_z - np.diag(pos)
    return float(np.mean(losses)), e_pos / z[:, None], e_neg / z[:, None]


def info_nce_loss(anchors, positives, negatives, tau, exclude_self=False):
    """Mean InfoNCE loss of a batch of (adapted) triplet embeddings.

    For anchor i the denominator runs over every positive and every hard
    negative in the batch, j = i included.  With exclude_self the
    anchor's own hard negative leaves the denominator.
    """
    if not tau > 0:
        raise InvalidConfig(_("tau must be positive"))
    h, p, q = _batch(anchors, positives, negatives)
    loss, _pp, _pn = _softmax_terms(_normalize(h)[0], _normalize(p)[0], _normalize(q)[0],
                                    tau, exclude_self)
    return loss


def _through_norm(grad, unit, norms):
    # d(x/|x|) backprop: (g - (g . u) u) / |x|
    return (grad - np.sum(grad * unit, axis=1)[:, None] * unit) / norms[:, None]


def info_nce_loss_and_grad(anchors, positives, negatives, params, tau, exclude_self=False):
    """Loss of the adapted batch and its exact gradient with respect to (W, b).

    anchors, positives and negatives are the frozen base embeddings.
    """
    if not tau > 0:
        raise InvalidConfig(_("tau must be positive"))
    x_h, x_p, x_q = _batch(anchors, positives, negatives)
    if x_h.shape[1] != params.dim:
        raise DimMismatch(_("Embeddings have dimension {got}, adapter expects {dim}")
                          .format(got=x_h.shape[1], dim=params.dim))
    n = x_h.shape[0]
    hn, h_norm = _normalize(apply_adapter_matrix(x_h, params))
    pn, p_norm = _normalize(apply_adapter_matrix(x_p, params))
    qn, q_norm = _normalize(apply_adapter_matrix(x_q, params))
    loss, prob_pos, prob_neg = _softmax_terms(hn, pn, qn, tau, exclude_self)

    g_pos = (prob_pos - np.eye(n)) / (n * tau)
    g_neg = prob_neg / (n * tau)
    d_hn = g_pos @ pn + g_neg @ qn
    d_pn = g_pos.T @ hn
    d_qn = g_neg.T @ hn

    d_h = _through_norm(d_hn, hn, h_norm)
    d_p = _through_norm(d_pn, pn, p_norm)
    d_q = _through_norm(d_qn, qn, q_norm)

    grad_W = d_h.T @ x_h + d_p.T @ x_p + d_q.T @ x_q
    grad_b = d_h.sum(axis=0) + d_p.sum(axis=0) + d_q.sum(axis=0)
    return loss, grad_W, grad_b


def info_nce_grad(anchors, positives, negatives, params, tau, exclude_self=False):
    _loss, grad_W, grad_b = info_nce_loss_and_grad(anchors, positives, negatives, params,
                                                    tau, exclude_self)
    return grad_W, grad_b


class SGD:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, params, grad_W, grad_b):
        return AdapterParams(params.W - self.learning_rate * grad_W,
                             params.b - self.learning_rate * grad_b)


class Adam:
    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grad_W, grad_b):
        if self.m is None:
            self.m = [np.zeros_like(grad_W), np.zeros_like(grad_b)]
            self.v = [np.zeros_like(grad_W), np.zeros_like(grad_b)]
        self.t += 1
        updated = []
        for i, (value, grad) in enumerate(((params.W, grad_W), (params.b, grad_b))):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * grad * grad
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            updated.append(value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps))
        return AdapterParams(*updated)


def make_optimizer(cfg):
    if cfg.optimizer == 'sgd':
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate)


def load_triplets(path):
    """Stream Triplets out of a JSON Lines file of {"anchor","positive","negative"}."""
    for lineno, obj in common.read_jsonl(path):
        try:
            yield Triplet(obj['anchor'], obj['positive'], obj['negative'])
        except KeyError as e:
            raise InvalidInput(_("{path}: line {lineno}: missing field {field}")
                               .format(path=path, lineno=lineno, field=e)) from e
        except InvalidInput as e:
            raise InvalidInput(_("{path}: line {lineno}: {error}")
                               .format(path=path, lineno=lineno, error=e.value)) from e


def embed_triplet_texts(triplets, backend, exemplars, audio_exemplars_as='caption'):
    """Embed every distinct triplet member once; returns a text -> vector dict."""
    texts = list(dict.fromkeys(t for triplet in triplets
                               for t in (triplet.anchor, triplet.positive, triplet.negative)))
    items = [Item(text, Modality.TEXT, text) for text in texts]
    vectors = embed_items(backend, items, PromptVariant.ONE_WORD_WITH_EXEMPLARS, exemplars,
                          audio_exemplars_as)
    return {text: v.values for text, v in zip(texts, vectors)}


def train(triplets, backend, cfg, exemplars=None, initial_params=None,
          audio_exemplars_as='caption'):
    """Train the adapter on text triplets and return a TrainReport.

    Members are embedded once with the one-word in-context prompt, then
    each epoch walks a seeded permutation in batches of cfg.batch_size;
    a short final batch is trained too.
    """
    triplets = list(triplets)
    if not triplets:
        raise InvalidInput(_("No triplets to train on"))
    if exemplars is None:
        exemplars = load_exemplars({})
    logging.info(_("Embedding the members of {n} triplets").format(n=len(triplets)))
    base = embed_triplet_texts(triplets, backend, exemplars, audio_exemplars_as)
    anchors = np.vstack([base[t.anchor] for t in triplets])
    positives = np.vstack([base[t.positive] for t in triplets])
    negatives = np.vstack([base[t.negative] for t in triplets])

    params = initial_params
    if params is None:
        params = AdapterParams.initial(anchors.shape[1], cfg.seed)
    optimizer = make_optimizer(cfg)
    rng = np.random.default_rng([cfg.seed & SEED_MASK, 1])

    loss_curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad_W, grad_b = info_nce_loss_and_grad(
                anchors[idx], positives[idx], negatives[idx], params, cfg.tau,
                cfg.exclude_self_negative)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad_W))
                    and np.all(np.isfinite(grad_b))):
                raise TrainingDiverged(_("Loss diverged at step {step}").format(step=step),
                                       step=step)
            loss_curve.append(loss)
            params = optimizer.step(params, grad_W, grad_b)
            step += 1
        logging.info(_("Epoch {epoch}: last batch loss {loss:.6f}")
                     .format(epoch=epoch + 1, loss=loss_curve[-1]))
    return TrainReport(loss_curve, params, step)


def main():

    global config, options

    parser = ArgumentParser()
    common.setup_global_opts(parser)
    common.add_backend_arguments(parser)
    common.add_output_argument(parser)
    parser.add_argument("triplets", help=_("Triplets as JSON Lines"))
    parser.add_argument("--adapter", default='adapter.evec',
                        help=_("Where to write the trained adapter parameters"))
    parser.add_argument("--tau", type=float, default=None,
                        help=_("Softmax temperature"))
    parser.add_argument("--batch-size", dest='batch_size', type=int, default=None,
                        help=_("Triplets per optimizer step"))
    parser.add_argument("--epochs", type=int, default=None,
                        help=_("Passes over the triplets"))
    parser.add_argument("--learning-rate", dest='learning_rate', type=float, default=None,
                        help=_("Optimizer step size"))
    parser.add_argument("--optimizer", choices=('sgd', 'adam'), default=None,
                        help=_("Optimizer"))
    parser.add_argument("--exclude-self-negative", dest='exclude_self_negative',
                        action='store_const', const=True, default=None,
                        help=_("Leave each anchor's own hard negative out of its denominator"))
    options = parser.parse_args()
    config = common.read_config(options)

    cfg = TrainConfig.from_config(config)
    exemplars = load_exemplars(config)
    triplets = list(load_triplets(options.triplets))
    with make_backend(BackendConfig.from_config(config)) as backend:
        report = train(triplets, backend, cfg, exemplars,
                       audio_exemplars_as=config['audio_exemplars_as'])

    report.final_params.write(options.adapter)
    logging.info(_("Wrote adapter to '{path}' after {steps} steps")
                 .format(path=options.adapter, steps=report.steps))
    common.write_output(report.to_json(), options.out)


if __name__ == "__main__":
    main()
