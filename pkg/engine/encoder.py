"""Missing-aware unimodal encoder.

Each feature becomes one token. Observed numerical values scale a learned
direction, observed categorical levels index a learned table, and a missing
feature keeps only its bias (its embedding comes from frozen zero rows). Tokens
then pass through pre-norm transformer layers whose attention is masked on both
the query and the key side, and the final tokens are flattened.
"""
from dataclasses import dataclass

import numpy as np

from engine import diffcore as dc
from errors import ConfigError, ContractError


@dataclass
class TokenSequence:
    tokens: dc.Tensor       # (batch, n_tokens, d_model)
    missing: np.ndarray     # (batch, n_tokens) bool


def build_attention_mask(missing):
    """Additive mask with -inf at (i, j) whenever token i or token j is missing."""
    missing = np.asarray(missing, dtype=bool)
    either = missing[..., :, None] | missing[..., None, :]
    return np.where(either, dc.MASKED, 0.0)


def masked_attention(q, k, v, mask):
    """ReLU(softmax(QK^T / sqrt(d_h) + M) + M^T) V for (..., n, d_h) inputs."""
    d_head = q.shape[-1]
    scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / np.sqrt(d_head))
    weights = dc.masked_softmax(scores, mask)
    weights = dc.relu(dc.add(weights, np.swapaxes(mask, -1, -2)))
    return dc.matmul(weights, v)


class MissingAwareEncoder:
    """Parameters and forward pass of one modality's encoder.

    Parameter names are prefixed with `encoder.<modality>.`; the zero rows used
    for missing features are registered frozen.
    """

    def __init__(self, modality, specs, params, d_model=32, n_heads=4, n_layers=2, ff_dim=64,
                 group_size=1, rng=None):
        if d_model % n_heads:
            raise ConfigError(f'd_model={d_model} is not divisible by n_heads={n_heads}')
        if group_size < 1:
            raise ConfigError('group_size must be >= 1')
        if group_size > 1 and any(spec.is_categorical for spec in specs):
            raise ConfigError(f'{modality}: token grouping needs an all-numerical block')
        self.modality = modality
        self.specs = list(specs)
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ff_dim = ff_dim
        self.group_size = group_size
        self.prefix = f'encoder.{modality}'
        self.params = params

        n_cols = len(self.specs)
        self.n_tokens = int(np.ceil(n_cols / group_size))
        self.cat_cols = np.array([j for j, s in enumerate(self.specs) if s.is_categorical], dtype=np.intp)
        self.num_cols = np.array([j for j, s in enumerate(self.specs) if not s.is_categorical], dtype=np.intp)
        cards = [self.specs[j].cardinality for j in self.cat_cols]
        self.cat_offsets = np.concatenate([[0], np.cumsum(cards)[:-1]]).astype(np.intp) if cards else np.zeros(0, np.intp)
        self.cat_cards = np.array(cards, dtype=np.intp)
        self.padding_index = int(np.sum(cards))
        # token order: numerical block then categorical block, restored to column order
        self.token_order = np.argsort(np.concatenate([self.num_cols, self.cat_cols]), kind='stable')

        rng = rng or np.random.default_rng(0)
        if not any(name.startswith(self.prefix + '.') for name in params):
            self._initialise(rng)

    @property
    def output_dim(self):
        return self.n_tokens * self.d_model

    def name(self, suffix):
        return f'{self.prefix}.{suffix}'

    def _initialise(self, rng):
        d, p = self.d_model, self.params
        p.add(self.name('bias'), rng.normal(0.0, 0.1, (self.n_tokens, d)))
        if self.group_size > 1:
            g = self.group_size
            p.add(self.name('group_present'), rng.normal(0.0, 1.0 / np.sqrt(g), (self.n_tokens, g, d)))
            p.add(self.name('group_missing'), np.zeros((self.n_tokens, d)), trainable=False)
        else:
            n_num = len(self.num_cols)
            p.add(self.name('num_present'), rng.normal(0.0, 1.0, (n_num, d)))
            p.add(self.name('num_missing'), np.zeros((n_num, d)), trainable=False)
            p.add(self.name('cat_table'), rng.normal(0.0, 1.0, (self.padding_index, d)))
            p.add(self.name('cat_padding'), np.zeros((1, d)), trainable=False)
        std = 1.0 / np.sqrt(d)
        for layer in range(self.n_layers):
            lp = f'layer{layer}'
            p.add(self.name(f'{lp}.ln1_gain'), np.ones(d))
            p.add(self.name(f'{lp}.ln1_bias'), np.zeros(d))
            for proj in ('wq', 'wk', 'wv', 'wo'):
                p.add(self.name(f'{lp}.{proj}'), rng.normal(0.0, std, (d, d)))
            p.add(self.name(f'{lp}.ln2_gain'), np.ones(d))
            p.add(self.name(f'{lp}.ln2_bias'), np.zeros(d))
            p.add(self.name(f'{lp}.ff_w1'), rng.normal(0.0, std, (d, self.ff_dim)))
            p.add(self.name(f'{lp}.ff_b1'), np.zeros(self.ff_dim))
            p.add(self.name(f'{lp}.ff_w2'), rng.normal(0.0, 1.0 / np.sqrt(self.ff_dim), (self.ff_dim, d)))
            p.add(self.name(f'{lp}.ff_b2'), np.zeros(d))

    # ------------------------------------------------------------------
    def _check_inputs(self, values, observed):
        values = np.asarray(values.value if isinstance(values, dc.Tensor) else values, dtype=np.float64)
        observed = np.asarray(observed, dtype=bool)
        if values.ndim == 1:
            values, observed = values[None, :], observed[None, :]
        if values.shape != observed.shape or values.shape[1] != len(self.specs):
            raise ContractError(f'{self.modality}: expected (batch, {len(self.specs)}) values and mask, '
                                f'got {values.shape} and {observed.shape}')
        if len(self.cat_cols):
            levels = values[:, self.cat_cols]
            seen = observed[:, self.cat_cols]
            bad = seen & ((levels < 0) | (levels >= self.cat_cards[None, :]) | (levels != np.round(levels)))
            if np.any(bad):
                raise ContractError(f'{self.modality}: categorical level out of range')
        return values, observed

    def embed(self, graph, leaves, values, observed):
        """Tokens b_j + E_j(x_j); missing tokens equal b_j exactly.

        `values` may be a Tensor leaf (to differentiate w.r.t. inputs); its
        masked entries are multiplied by zero so they carry no gradient.
        """
        raw, observed = self._check_inputs(values, observed)
        batch = raw.shape[0]
        keep = observed.astype(np.float64)
        if isinstance(values, dc.Tensor):
            clean = dc.mul(dc.reshape(values, raw.shape), keep)
        else:
            clean = graph.constant(np.where(observed, raw, 0.0))
        bias = leaves[self.name('bias')]

        if self.group_size > 1:
            g = self.group_size
            pad = self.n_tokens * g - raw.shape[1]
            if pad:
                clean = dc.concat([clean, np.zeros((batch, pad))], axis=1)
                keep = np.concatenate([keep, np.zeros((batch, pad))], axis=1)
            grouped = dc.reshape(clean, (batch, self.n_tokens, 1, g))
            tokens = dc.reshape(dc.matmul(grouped, leaves[self.name('group_present')]),
                                (batch, self.n_tokens, self.d_model))
            missing = keep.reshape(batch, self.n_tokens, g).sum(axis=2) == 0
            absent = missing[:, :, None].astype(np.float64)
            tokens = dc.add(tokens, dc.mul(leaves[self.name('group_missing')], absent))
            return TokenSequence(dc.add(tokens, bias), missing)

        parts = []
        if len(self.num_cols):
            x_num = dc.reshape(dc.take(clean, self.num_cols, axis=1), (batch, len(self.num_cols), 1))
            num = dc.mul(x_num, leaves[self.name('num_present')])
            absent = (1.0 - keep[:, self.num_cols])[:, :, None]
            parts.append(dc.add(num, dc.mul(leaves[self.name('num_missing')], absent)))
        if len(self.cat_cols):
            levels = np.where(observed[:, self.cat_cols], raw[:, self.cat_cols], 0).astype(np.intp)
            index = np.where(observed[:, self.cat_cols], self.cat_offsets[None, :] + levels,
                             self.padding_index)
            table = dc.concat([leaves[self.name('cat_table')], leaves[self.name('cat_padding')]], axis=0)
            parts.append(dc.take(table, index, axis=0))
        tokens = parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)
        if len(parts) > 1:
            tokens = dc.take(tokens, self.token_order, axis=1)
        return TokenSequence(dc.add(tokens, bias), ~observed)

    def _layer(self, leaves, x, mask, layer):
        lp = self.name(f'layer{layer}')
        batch, n, d = x.shape
        h, dh = self.n_heads, d // self.n_heads

        def heads(t):
            return dc.permute(dc.reshape(t, (batch, n, h, dh)), (0, 2, 1, 3))

        xn = dc.layer_norm(x, leaves[f'{lp}.ln1_gain'], leaves[f'{lp}.ln1_bias'])
        q = heads(dc.matmul(xn, leaves[f'{lp}.wq']))
        k = heads(dc.matmul(xn, leaves[f'{lp}.wk']))
        v = heads(dc.matmul(xn, leaves[f'{lp}.wv']))
        attended = masked_attention(q, k, v, mask[:, None, :, :])
        merged = dc.reshape(dc.permute(attended, (0, 2, 1, 3)), (batch, n, d))
        x = dc.add(x, dc.matmul(merged, leaves[f'{lp}.wo']))

        xn = dc.layer_norm(x, leaves[f'{lp}.ln2_gain'], leaves[f'{lp}.ln2_bias'])
        hidden = dc.relu(dc.add(dc.matmul(xn, leaves[f'{lp}.ff_w1']), leaves[f'{lp}.ff_b1']))
        ff = dc.add(dc.matmul(hidden, leaves[f'{lp}.ff_w2']), leaves[f'{lp}.ff_b2'])
        return dc.add(x, ff)

    def encode(self, graph, leaves, values, observed):
        """h = flatten(layers(embed(values, observed))), shape (batch, n_tokens * d_model)"""
        sequence = self.embed(graph, leaves, values, observed)
        mask = build_attention_mask(sequence.missing)
        x = sequence.tokens
        for layer in range(self.n_layers):
            x = self._layer(leaves, x, mask, layer)
        batch = x.shape[0]
        return dc.reshape(x, (batch, self.output_dim))


def embed_features(values, observed, encoder):
    """Token array for a single patient or a batch, outside any training graph."""
    graph = dc.ValueGraph()
    sequence = encoder.embed(graph, encoder.params.bind(graph), values, observed)
    return sequence.tokens.value, sequence.missing


def encode(values, observed, encoder):
    """h_i for each row of `values`, outside any training graph."""
    graph = dc.ValueGraph()
    h = encoder.encode(graph, encoder.params.bind(graph), values, observed)
    return h.value
