"""Risk heads mapping a latent vector to a scalar score.

`OdstHead` is an ensemble of oblivious differentiable trees followed by a
fully connected layer. `LinearHead` and `MlpHead` are the ablation heads used
by the unimodal baselines.
"""
import logging

import numpy as np

from engine import diffcore as dc
from errors import ConfigError, ContractError
from models import HeadKind

logger = logging.getLogger(__name__)


class OdstHead:
    """Oblivious trees: one soft split per depth, shared by every node at that depth.

    For tree t and depth d the split reads f = softmax(selection[t, d]) . h and
    opens gate g = sigmoid((f - threshold[t, d]) / temperature[t, d]). Leaf l
    has probability prod_d (bit_d(l) ? g_d : 1 - g_d), bit 0 being the least
    significant. The tree output is the probability-weighted leaf response.
    """
    kind = HeadKind.ODST

    def __init__(self, prefix, in_dim, params, n_trees=8, depth=4, out_dim=1, rng=None, **_):
        if n_trees < 1 or depth < 1 or out_dim < 1:
            raise ConfigError('n_trees, depth and out_dim must all be >= 1')
        self.prefix = prefix
        self.in_dim = in_dim
        self.n_trees = n_trees
        self.depth = depth
        self.out_dim = out_dim
        self.n_leaves = 2 ** depth
        self.params = params
        self.thresholds_ready = False
        if self.name('selection') in params:
            self.thresholds_ready = True
            return
        rng = rng or np.random.default_rng(0)
        params.add(self.name('selection'), np.zeros((n_trees, depth, in_dim)))
        params.add(self.name('threshold'), np.zeros((n_trees, depth)))
        params.add(self.name('log_temperature'), np.zeros((n_trees, depth)))
        params.add(self.name('response'), rng.normal(0.0, 1.0, (n_trees, self.n_leaves, out_dim)))
        width = n_trees * out_dim
        params.add(self.name('fc_weight'), rng.normal(0.0, 1.0 / np.sqrt(width), (width, 1)))
        params.add(self.name('fc_bias'), np.zeros(1))

    def name(self, suffix):
        return f'{self.prefix}.{suffix}'

    @property
    def output_dim(self):
        return self.n_trees * self.out_dim

    def _selected(self, leaves, h):
        selection = dc.softmax(leaves[self.name('selection')])
        flat = dc.reshape(selection, (self.n_trees * self.depth, self.in_dim))
        f = dc.matmul(h, dc.transpose(flat))
        return dc.reshape(f, (h.shape[0], self.n_trees, self.depth))

    def init_thresholds(self, h_values):
        """Spread thresholds over quantiles of the selected features of one batch."""
        h_values = np.asarray(h_values, dtype=np.float64)
        graph = dc.ValueGraph()
        f = self._selected(self.params.bind(graph), graph.constant(h_values)).value
        slots = self.n_trees * self.depth
        levels = (np.arange(slots) + 0.5) / slots
        for slot, level in enumerate(levels):
            t, d = divmod(slot, self.depth)
            self.params[self.name('threshold')][t, d] = np.quantile(f[:, t, d], level)
        logger.debug("%s: thresholds set from a batch of %d", self.prefix, len(h_values))
        self.thresholds_ready = True

    def leaf_probabilities(self, leaves, h):
        """(batch, n_trees, 2**depth) routing probabilities."""
        f = self._selected(leaves, h)
        inverse_temperature = dc.exp(dc.neg(leaves[self.name('log_temperature')]))
        gates = dc.sigmoid(dc.mul(dc.sub(f, leaves[self.name('threshold')]), inverse_temperature))
        probs = None
        for d in range(self.depth):
            g = dc.take(gates, [d], axis=2)
            if probs is None:
                probs = dc.concat([dc.sub(1.0, g), g], axis=2)
            else:
                probs = dc.concat([dc.mul(probs, dc.sub(1.0, g)), dc.mul(probs, g)], axis=2)
        return probs

    def trees(self, leaves, h):
        """odst_forward: (batch, n_trees * out_dim)"""
        if h.shape[-1] != self.in_dim:
            raise ContractError(f'{self.prefix}: expected input width {self.in_dim}, got {h.shape[-1]}')
        batch = h.shape[0]
        probs = dc.reshape(self.leaf_probabilities(leaves, h), (batch, self.n_trees, 1, self.n_leaves))
        out = dc.matmul(probs, leaves[self.name('response')])
        return dc.reshape(out, (batch, self.output_dim))

    def forward(self, graph, leaves, h):
        """head_forward: y = FC(trees(h)), shape (batch,)"""
        out = dc.matmul(self.trees(leaves, h), leaves[self.name('fc_weight')])
        y = dc.add(out, leaves[self.name('fc_bias')])
        return dc.reshape(y, (h.shape[0],))


class LinearHead:
    kind = HeadKind.LINEAR

    def __init__(self, prefix, in_dim, params, rng=None, **_):
        self.prefix = prefix
        self.in_dim = in_dim
        self.params = params
        self.thresholds_ready = True
        if self.name('weight') not in params:
            rng = rng or np.random.default_rng(0)
            params.add(self.name('weight'), rng.normal(0.0, 1.0 / np.sqrt(max(in_dim, 1)), (in_dim, 1)))
            params.add(self.name('bias'), np.zeros(1))

    def name(self, suffix):
        return f'{self.prefix}.{suffix}'

    def init_thresholds(self, h_values):
        pass

    def forward(self, graph, leaves, h):
        y = dc.add(dc.matmul(h, leaves[self.name('weight')]), leaves[self.name('bias')])
        return dc.reshape(y, (h.shape[0],))


class MlpHead:
    """Two-layer ReLU perceptron"""
    kind = HeadKind.MLP

    def __init__(self, prefix, in_dim, params, hidden=64, rng=None, **_):
        self.prefix = prefix
        self.in_dim = in_dim
        self.hidden = hidden
        self.params = params
        self.thresholds_ready = True
        if self.name('w1') not in params:
            rng = rng or np.random.default_rng(0)
            params.add(self.name('w1'), rng.normal(0.0, np.sqrt(2.0 / max(in_dim, 1)), (in_dim, hidden)))
            params.add(self.name('b1'), np.zeros(hidden))
            params.add(self.name('w2'), rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1)))
            params.add(self.name('b2'), np.zeros(1))

    def name(self, suffix):
        return f'{self.prefix}.{suffix}'

    def init_thresholds(self, h_values):
        pass

    def forward(self, graph, leaves, h):
        hidden = dc.relu(dc.add(dc.matmul(h, leaves[self.name('w1')]), leaves[self.name('b1')]))
        y = dc.add(dc.matmul(hidden, leaves[self.name('w2')]), leaves[self.name('b2')])
        return dc.reshape(y, (h.shape[0],))


HEADS = {
    HeadKind.ODST: OdstHead,
    HeadKind.LINEAR: LinearHead,
    HeadKind.MLP: MlpHead,
}


def build_head(kind, prefix, in_dim, params, **options):
    try:
        cls = HEADS[HeadKind(kind)]
    except ValueError:
        raise ConfigError(f'unknown head {kind!r}; expected one of {[k.value for k in HeadKind]}')
    return cls(prefix, in_dim, params, **options)


def odst_forward(h, head):
    """Concatenated tree outputs for a (batch, in_dim) array, outside any training graph."""
    graph = dc.ValueGraph()
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return head.trees(head.params.bind(graph), graph.constant(h)).value


def head_forward(h, head):
    graph = dc.ValueGraph()
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return head.forward(graph, head.params.bind(graph), graph.constant(h)).value
