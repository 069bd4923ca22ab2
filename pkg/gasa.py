"""Geometry-aware decoder: distance kernel, biased attention, layers and heads."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import numerics as nx
from config import ModelConfig
from errors import KernelInitError, PreconditionError, ShapeError
from geometry import Camera, DepthMap, PointMap, WorldPE, mask_weighted_centroid, pairwise_distances, unproject

SeedLike = Union[int, np.random.Generator]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Distance kernel
# ---------------------------------------------------------------------------

def _kernel_target(d: np.ndarray) -> np.ndarray:
    return -np.log1p(d)


@dataclass
class DistanceKernel:
    """phi(d): meters to a non-positive attention bias, clamped to [lo, hi].

    `learned` is a 1 -> hidden -> 1 ReLU perceptron. `rbf`, `linear` and `off`
    are fixed forms; their perceptron weights exist but are unused.
    """

    params: Dict[str, nx.DualTensor]
    mode: str = "learned"
    clamp: Tuple[float, float] = (-10.0, 0.0)
    rbf_sigma: float = 2.0

    @property
    def floor(self) -> float:
        return self.clamp[0]

    def raw(self, dist: np.ndarray) -> nx.DualTensor:
        p = self.params
        d = np.asarray(dist, dtype=np.float64).reshape(-1, 1)
        hidden = nx.relu(nx.matmul(d, p["w1"]) + p["b1"])
        out = nx.matmul(hidden, p["w2"]) + p["b2"]
        return nx.reshape(out, np.shape(dist))

    def __call__(self, dist: np.ndarray) -> Optional[nx.DualTensor]:
        """Clamped phi over a distance array; None when the kernel is off."""
        lo, hi = self.clamp
        dist = np.asarray(dist, dtype=np.float64)
        if self.mode == "off":
            return None
        if self.mode == "rbf":
            return nx.DualTensor(np.clip(-dist * dist / (2.0 * self.rbf_sigma ** 2), lo, hi))
        if self.mode == "linear":
            return nx.DualTensor(np.clip(-dist, lo, hi))
        return nx.clip(self.raw(dist), lo, hi)

    def evaluate(self, dist) -> np.ndarray:
        with nx.no_grad():
            out = self(np.asarray(dist, dtype=np.float64))
        if out is None:
            return np.zeros(np.shape(dist))
        return out.value


def _knot_construction(hidden: int, clamp: Tuple[float, float]) -> Dict[str, np.ndarray]:
    """Piecewise-linear interpolant of -log(1+d) on log-spaced knots over [0, 20].

    Unit 0 is a constant unit; units 1.. are ReLU hinges. The first hinge sits
    just below zero so d = 0 is inside a linear piece.
    """
    knots = np.expm1(np.linspace(0.0, np.log(21.0), hidden - 1))
    knots[0] = -0.05
    values = _kernel_target(knots)
    slopes = np.diff(values) / np.diff(knots)
    slope_changes = np.concatenate([[slopes[0]], np.diff(slopes), [0.0]])

    w1 = np.concatenate([[0.0], np.ones(hidden - 1)])
    b1 = np.concatenate([[1.0], -knots])
    b2 = -1.0
    w2 = np.concatenate([[values[0] - b2], slope_changes[: hidden - 1]])
    return {"w1": w1.reshape(1, hidden), "b1": b1, "w2": w2.reshape(hidden, 1), "b2": np.array([b2])}


def kernel_init(seed: SeedLike = 0, hidden: int = 32, clamp: Sequence[float] = (-10.0, 0.0),
                tolerance: float = 0.05, max_iters: int = 200, learning_rate: float = 1e-3,
                prefix: str = "kernel", mode: str = "learned", rbf_sigma: float = 2.0) -> DistanceKernel:
    """Fit phi to -log(1+d) on d in [0, 20] and return the kernel.

    The fit is a hinge construction: a piecewise-linear interpolant on
    log-spaced knots, with small seeded jitter on the output weights. It meets
    the default tolerance as built. Plain gradient descent on squared error only
    runs when a tighter `tolerance` is asked for, and the best iterate is kept.
    """
    rng = _rng(seed)
    init = _knot_construction(hidden, tuple(clamp))
    init["w2"] = init["w2"] + rng.normal(0.0, 1e-4, size=init["w2"].shape)
    params = {name: nx.parameter(value, f"{prefix}.{name}") for name, value in init.items()}
    kernel = DistanceKernel(params=params, mode=mode, clamp=(float(clamp[0]), float(clamp[1])),
                            rbf_sigma=rbf_sigma)

    grid = np.arange(0.0, 20.0 + 1e-9, 0.1)
    target = _kernel_target(grid)

    def max_error() -> float:
        with nx.no_grad():
            fitted = nx.clip(kernel.raw(grid), *kernel.clamp).value
        return float(np.max(np.abs(fitted - target)))

    best_error = max_error()
    best = {name: p.value.copy() for name, p in params.items()}
    for _ in range(max_iters):
        if best_error < tolerance:
            break
        residual = kernel.raw(grid) - target
        loss = nx.mean(residual * residual)
        loss.backward()
        for p in params.values():
            p.value = p.value - learning_rate * p.grad
        error = max_error()
        if error < best_error:
            best_error = error
            best = {name: p.value.copy() for name, p in params.items()}

    for name, p in params.items():
        p.value = best[name]
    if best_error >= tolerance:
        raise KernelInitError(best_error, tolerance)
    return kernel


def gasa_bias(kernel: DistanceKernel, beta, dist: np.ndarray,
              valid_pairs: Optional[np.ndarray] = None) -> Optional[nx.DualTensor]:
    """beta * phi(dist); pairs flagged invalid get beta * floor. None when the kernel is off."""
    phi = kernel(dist)
    if phi is None:
        return None
    if valid_pairs is not None:
        valid = np.asarray(valid_pairs, dtype=np.float64)
        phi = phi * valid + kernel.floor * (1.0 - valid)
    return nx.as_dual(beta) * phi


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class LayerNorm:
    def __init__(self, dim: int, prefix: str):
        self.params = {
            "g": nx.parameter(np.ones(dim), f"{prefix}.g"),
            "b": nx.parameter(np.zeros(dim), f"{prefix}.b"),
        }

    def __call__(self, x) -> nx.DualTensor:
        return nx.layer_norm(x, self.params["g"], self.params["b"])


class MultiHeadAttention:
    """Bias-free projections; an optional additive bias is shared across heads."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, prefix: str):
        if dim % num_heads != 0:
            raise ShapeError(f"dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.params = {
            name: nx.parameter(nx.dense_init(rng, dim, dim), f"{prefix}.{name}")
            for name in ("wq", "wk", "wv", "wo")
        }

    def _split(self, x: nx.DualTensor) -> nx.DualTensor:
        n = x.shape[0]
        return nx.transpose(nx.reshape(x, (n, self.num_heads, self.head_dim)), (1, 0, 2))

    def __call__(self, queries, keys, bias: Optional[nx.DualTensor] = None
                 ) -> Tuple[nx.DualTensor, np.ndarray]:
        """Attend (n, D) queries over (m, D) keys. Returns (output, weights of shape (h, n, m))."""
        queries, keys = nx.as_dual(queries), nx.as_dual(keys)
        if queries.shape[-1] != self.dim or keys.shape[-1] != self.dim:
            raise ShapeError(f"attention: expected width {self.dim}, got {queries.shape} and {keys.shape}")
        p = self.params
        q = self._split(nx.matmul(queries, p["wq"]))
        k = self._split(nx.matmul(keys, p["wk"]))
        v = self._split(nx.matmul(keys, p["wv"]))
        logits = nx.matmul(q, nx.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.head_dim))
        if bias is not None and bias.shape != (queries.shape[0], keys.shape[0]):
            raise ShapeError(f"attention bias {bias.shape} does not match ({queries.shape[0]}, {keys.shape[0]})")
        weights = nx.softmax_with_bias(logits, bias)
        context = nx.matmul(weights, v)
        merged = nx.reshape(nx.transpose(context, (1, 0, 2)), (queries.shape[0], self.dim))
        return nx.matmul(merged, p["wo"]), weights.value


class FeedForward:
    def __init__(self, dim: int, mult: int, rng: np.random.Generator, prefix: str):
        self.params = {
            "w1": nx.parameter(nx.dense_init(rng, dim, dim * mult), f"{prefix}.w1"),
            "b1": nx.parameter(np.zeros(dim * mult), f"{prefix}.b1"),
            "w2": nx.parameter(nx.dense_init(rng, dim * mult, dim), f"{prefix}.w2"),
            "b2": nx.parameter(np.zeros(dim), f"{prefix}.b2"),
        }

    def __call__(self, x) -> nx.DualTensor:
        p = self.params
        return nx.matmul(nx.gelu(nx.matmul(x, p["w1"]) + p["b1"]), p["w2"]) + p["b2"]


def gasa_attention(attention: MultiHeadAttention, queries, keys, kernel: DistanceKernel, beta,
                   query_positions: Optional[np.ndarray] = None, key_positions: Optional[np.ndarray] = None,
                   query_valid: Optional[np.ndarray] = None, key_valid: Optional[np.ndarray] = None
                   ) -> Tuple[nx.DualTensor, np.ndarray]:
    """softmax(QK^T / sqrt(d) + beta * phi(|P_Q - P_K|)) V, per head.

    Without positions on either side the attention is unbiased.
    """
    bias = None
    if query_positions is not None and key_positions is not None:
        dist = pairwise_distances(query_positions, key_positions)
        valid_pairs = None
        if query_valid is not None or key_valid is not None:
            qv = np.ones(len(query_positions), bool) if query_valid is None else np.asarray(query_valid, bool)
            kv = np.ones(len(key_positions), bool) if key_valid is None else np.asarray(key_valid, bool)
            valid_pairs = qv[:, None] & kv[None, :]
        bias = gasa_bias(kernel, beta, dist, valid_pairs)
    return attention(queries, keys, bias)


# ---------------------------------------------------------------------------
# Tokens and memory
# ---------------------------------------------------------------------------

@dataclass
class TokenGrid:
    """Model-independent tokenization of a multi-view bundle.

    Tokens are block x block pixel patches: mean-pooled features, world
    position of the patch's center pixel. `reference` is the camera whose
    frame the positional encoding is expressed in (view 0 when tokenized
    from a bundle); without one the encoding sees raw world coordinates.
    """

    features: np.ndarray     # (V, n, F)
    positions: np.ndarray    # (V, n, 3)
    valid: np.ndarray        # (V, n) bool
    pixel_token: np.ndarray  # (V, H, W) index into the concatenated V*n tokens
    point_maps: List[PointMap]
    reference: Optional[Camera] = None
    anchors: Optional[np.ndarray] = None  # (V, n) flat pixel index each position was read from

    @property
    def frame_positions(self) -> np.ndarray:
        """Token positions in the reference camera frame, (V, n, 3)."""
        if self.reference is None:
            return self.positions
        return self.reference.to_camera_frame(self.positions)

    @property
    def num_views(self) -> int:
        return self.features.shape[0]

    @property
    def tokens_per_view(self) -> int:
        return self.features.shape[1]


def tokenize_views(features: Sequence[np.ndarray], depths: Sequence[np.ndarray],
                   cameras: Sequence[Camera], block: int = 4) -> TokenGrid:
    if not features:
        raise PreconditionError("Cannot tokenize an empty view list")
    pooled, positions, valid, pixel_token, anchors, point_maps = [], [], [], [], [], []
    offset = 0
    for feat, depth, camera in zip(features, depths, cameras):
        height, width, dim = feat.shape
        if height % block or width % block:
            raise ShapeError(f"Image {height}x{width} is not divisible into {block}x{block} blocks")
        rows, cols = height // block, width // block
        points = unproject(camera, DepthMap(np.asarray(depth, dtype=np.float64)))
        point_maps.append(points)
        pooled.append(feat.reshape(rows, block, cols, block, dim).mean(axis=(1, 3)).reshape(-1, dim))
        ys = np.repeat(np.arange(rows) * block + block // 2, cols)
        xs = np.tile(np.arange(cols) * block + block // 2, rows)
        positions.append(points.points[ys, xs])
        valid.append(points.valid[ys, xs])
        anchors.append(ys * width + xs)
        grid_y, grid_x = np.meshgrid(np.arange(height) // block, np.arange(width) // block, indexing="ij")
        pixel_token.append(offset + grid_y * cols + grid_x)
        offset += rows * cols
    return TokenGrid(
        features=np.stack(pooled), positions=np.stack(positions), valid=np.stack(valid),
        pixel_token=np.stack(pixel_token).astype(np.int64), point_maps=point_maps, reference=cameras[0],
        anchors=np.stack(anchors).astype(np.int64),
    )


@dataclass
class EncoderMemory:
    """Geometry-refined token features for all views of one scene."""

    tokens: nx.DualTensor      # (V * n, D)
    positions: np.ndarray      # (V * n, 3)
    valid: np.ndarray          # (V * n,)
    pixel_token: np.ndarray    # (V, H, W)
    point_maps: List[PointMap]
    num_views: int
    attention: List[np.ndarray] = field(default_factory=list)  # per view (h, n, n)

    @property
    def tokens_per_view(self) -> int:
        return self.tokens.shape[0] // self.num_views


def attention_pair_count(memory: EncoderMemory, cross_view: bool = False) -> int:
    """Number of token pairs the geometric self-attention scores."""
    n = memory.tokens_per_view
    if cross_view:
        return (memory.num_views * n) ** 2
    return memory.num_views * n * n


def attention_mass(memory: EncoderMemory, sources: np.ndarray, targets: np.ndarray) -> float:
    """Mean share of encoder attention that `sources` tokens put on `targets` tokens.

    Both masks are (V, n). Views without both kinds of token are skipped.
    """
    shares = []
    for v, weights in enumerate(memory.attention):
        src, tgt = np.asarray(sources[v], bool), np.asarray(targets[v], bool)
        if src.any() and tgt.any():
            shares.append(weights[:, src][:, :, tgt].sum(axis=-1).mean())
    if not shares:
        raise PreconditionError("No view holds both source and target tokens")
    return float(np.mean(shares))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class GasaLayer:
    def __init__(self, dim: int, num_heads: int, ffn_mult: int, beta_init: float,
                 rng: np.random.Generator, prefix: str):
        self.self_attn = MultiHeadAttention(dim, num_heads, rng, f"{prefix}.self_attn")
        self.text_attn = MultiHeadAttention(dim, num_heads, rng, f"{prefix}.text_attn")
        self.gasa_attn = MultiHeadAttention(dim, num_heads, rng, f"{prefix}.gasa_attn")
        self.beta = nx.parameter(np.array([beta_init]), f"{prefix}.beta")
        self.norms = [LayerNorm(dim, f"{prefix}.norm{i}") for i in range(1, 5)]
        self.ffn = FeedForward(dim, ffn_mult, rng, f"{prefix}.ffn")

    def modules(self):
        return [self.self_attn, self.text_attn, self.gasa_attn, *self.norms, self.ffn]

    def __call__(self, x, text_token, memory: EncoderMemory, kernel: DistanceKernel,
                 query_positions: Optional[np.ndarray]) -> Tuple[nx.DualTensor, np.ndarray]:
        n1, n2, n3, n4 = self.norms
        h = n1(x)
        x = x + self.self_attn(h, h)[0]
        x = x + self.text_attn(n2(x), text_token)[0]
        h = n3(x)
        if query_positions is None:
            out, weights = self.gasa_attn(h, memory.tokens)
        else:
            out, weights = gasa_attention(
                self.gasa_attn, h, memory.tokens, kernel, self.beta,
                query_positions=query_positions, key_positions=memory.positions,
                key_valid=memory.valid,
            )
        x = x + out
        x = x + self.ffn(n4(x))
        return x, weights


@dataclass
class DecoderOutput:
    """Differentiable decoder outputs for one (scene, prompt) pair."""

    masks: nx.DualTensor        # (Q, V, H, W) probabilities
    confidences: nx.DualTensor  # (Q,)
    centroid: nx.DualTensor     # (3,) regressed, from the best-confidence query
    best_query: int


@dataclass
class Prediction:
    masks: np.ndarray            # (Q, V, H, W)
    confidences: np.ndarray      # (Q,)
    presence: float
    view_scores: np.ndarray      # (Q, V)
    best_query: int
    best_view: int
    centroid: np.ndarray         # mask-weighted unprojection centroid (primary)
    regressed_centroid: np.ndarray
    centroid_weight: float

    @property
    def best_mask(self) -> np.ndarray:
        return self.masks[self.best_query, self.best_view]


class GasaModel:
    """All learnable parameters plus the fixed hyperparameters they were built with.

    Every parameter is created regardless of ablation switches, in a fixed
    order, so two models built from the same seed share their common weights.
    """

    def __init__(self, config: ModelConfig, seed: SeedLike = 0):
        self.config = config
        rng = _rng(seed)
        d, f = config.dim, config.feature_dim
        self.query_embed = nx.parameter(rng.normal(0.0, 1.0, (config.num_queries, d)), "query_embed")
        self.spatial_embed = nx.parameter(
            rng.normal(0.0, 0.02, (config.num_spatial_tokens, d)), "spatial_embed"
        )
        self.text_proj = {
            "w": nx.parameter(nx.dense_init(rng, f, d), "text_proj.w"),
            "b": nx.parameter(np.zeros(d), "text_proj.b"),
        }
        self.feat_proj = {
            "w": nx.parameter(nx.dense_init(rng, f, d), "feat_proj.w"),
            "b": nx.parameter(np.zeros(d), "feat_proj.b"),
        }
        self.world_pe = WorldPE.create(rng, d, config.pe_frequencies, config.pe_scale, prefix="pe")
        self.kernel = kernel_init(
            rng, hidden=config.kernel_hidden, clamp=config.kernel_clamp,
            tolerance=config.kernel_tolerance, mode=config.kernel, rbf_sigma=config.rbf_sigma,
        )
        self.encoder_norm = LayerNorm(d, "encoder.norm")
        self.encoder_attn = MultiHeadAttention(d, config.num_heads, rng, "encoder.attn")
        self.encoder_beta = nx.parameter(np.array([config.beta_init]), "encoder.beta")
        self.layers = [
            GasaLayer(d, config.num_heads, config.ffn_mult, config.beta_init, rng, f"layers.{i}")
            for i in range(config.num_layers)
        ]
        self.final_norm = LayerNorm(d, "final_norm")
        self.mask_head = {
            "w": nx.parameter(nx.dense_init(rng, d, d), "mask_head.w"),
            "b": nx.parameter(np.zeros(1), "mask_head.b"),
        }
        self.memory_norm = LayerNorm(d, "memory_norm")
        self.confidence_head = {
            "w": nx.parameter(nx.dense_init(rng, d, 1), "confidence_head.w"),
            "b": nx.parameter(np.zeros(1), "confidence_head.b"),
        }
        self.centroid_head = {
            "w1": nx.parameter(nx.dense_init(rng, d, config.centroid_hidden), "centroid_head.w1"),
            "b1": nx.parameter(np.zeros(config.centroid_hidden), "centroid_head.b1"),
            "w2": nx.parameter(nx.dense_init(rng, config.centroid_hidden, 3), "centroid_head.w2"),
            "b2": nx.parameter(np.zeros(3), "centroid_head.b2"),
        }

    # -- parameter registry -------------------------------------------------

    def _owners(self) -> List[Tuple[object, str]]:
        """(container, key) for every parameter, in creation order."""
        owners: List[Tuple[object, str]] = [(self, "query_embed"), (self, "spatial_embed")]
        owners += [(self.text_proj, k) for k in self.text_proj]
        owners += [(self.feat_proj, k) for k in self.feat_proj]
        owners += [(self.world_pe.params, k) for k in self.world_pe.params]
        owners += [(self.kernel.params, k) for k in self.kernel.params]
        owners += [(self.encoder_norm.params, k) for k in self.encoder_norm.params]
        owners += [(self.encoder_attn.params, k) for k in self.encoder_attn.params]
        owners.append((self, "encoder_beta"))
        for layer in self.layers:
            for module in layer.modules()[:3]:
                owners += [(module.params, k) for k in module.params]
            owners.append((layer, "beta"))
            for module in layer.modules()[3:]:
                owners += [(module.params, k) for k in module.params]
        for container in (self.final_norm.params, self.mask_head, self.memory_norm.params,
                          self.confidence_head, self.centroid_head):
            owners += [(container, k) for k in container]
        return owners

    @staticmethod
    def _get(container, key) -> nx.DualTensor:
        return container[key] if isinstance(container, dict) else getattr(container, key)

    def parameters(self) -> Dict[str, nx.DualTensor]:
        params = {}
        for container, key in self._owners():
            tensor = self._get(container, key)
            params[tensor.name] = tensor
        return params

    def replace_parameter(self, name: str, tensor: nx.DualTensor) -> nx.DualTensor:
        """Swap the tensor registered under `name`; returns the previous one."""
        for container, key in self._owners():
            current = self._get(container, key)
            if current.name == name:
                tensor.name = name
                if isinstance(container, dict):
                    container[key] = tensor
                else:
                    setattr(container, key, tensor)
                return current
        raise KeyError(f"No parameter named '{name}'")

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"State is missing parameters: {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"Parameter {name}: stored {value.shape}, model expects {p.shape}")
            p.value = value.astype(p.value.dtype)

    # -- forward ------------------------------------------------------------

    def encode(self, grid: TokenGrid) -> EncoderMemory:
        """One round of geometry-biased token self-attention per view."""
        views, n, _ = grid.features.shape
        frame_positions = grid.frame_positions
        refined, attention = [], []
        for v in range(views):
            x = nx.matmul(grid.features[v], self.feat_proj["w"]) + self.feat_proj["b"]
            if self.config.world_pe:
                x = x + self.world_pe(frame_positions[v], grid.valid[v])
            h = self.encoder_norm(x)
            out, weights = gasa_attention(
                self.encoder_attn, h, h, self.kernel, self.encoder_beta,
                query_positions=grid.positions[v], key_positions=grid.positions[v],
                query_valid=grid.valid[v], key_valid=grid.valid[v],
            )
            refined.append(x + out)
            attention.append(weights)
        return EncoderMemory(
            tokens=nx.concat(refined, axis=0),
            positions=grid.positions.reshape(views * n, 3),
            valid=grid.valid.reshape(views * n),
            pixel_token=grid.pixel_token,
            point_maps=grid.point_maps,
            num_views=views,
            attention=attention,
        )

    def forward(self, memory: EncoderMemory, text_embedding: np.ndarray, qualifier_index: int = 0
                ) -> DecoderOutput:
        cfg = self.config
        if memory.tokens.shape[0] == 0:
            raise PreconditionError("Encoder memory is empty")
        if not 0 <= qualifier_index < cfg.num_spatial_tokens:
            raise PreconditionError(
                f"qualifier_index {qualifier_index} outside [0, {cfg.num_spatial_tokens - 1}]"
            )
        text = np.asarray(text_embedding, dtype=np.float64).reshape(1, -1)
        text_token = nx.matmul(text, self.text_proj["w"]) + self.text_proj["b"]

        x = self.query_embed
        # index 0 means "no qualifier": nothing is added
        if cfg.spatial_tokens and qualifier_index > 0:
            x = x + self.spatial_embed[qualifier_index]

        query_positions = None
        for layer in self.layers:
            x, weights = layer(x, text_token, memory, self.kernel, query_positions)
            if cfg.query_bias:
                attended = np.argmax(weights.mean(axis=0), axis=-1)
                query_positions = memory.positions[attended]
        x = self.final_norm(x)

        keys = self.memory_norm(memory.tokens)
        logits = nx.matmul(nx.matmul(x, self.mask_head["w"]), nx.transpose(keys)) * (1.0 / np.sqrt(cfg.dim))
        token_probs = nx.sigmoid(logits + self.mask_head["b"])
        views, height, width = memory.pixel_token.shape
        masks = nx.reshape(
            nx.take(token_probs, memory.pixel_token.reshape(-1), axis=1),
            (cfg.num_queries, views, height, width),
        )

        conf_logits = nx.matmul(x, self.confidence_head["w"]) + self.confidence_head["b"]
        confidences = nx.reshape(nx.sigmoid(conf_logits), (cfg.num_queries,))
        best = int(np.argmax(confidences.value))

        c = self.centroid_head
        state = nx.reshape(x[best], (1, cfg.dim))
        hidden = nx.gelu(nx.matmul(state, c["w1"]) + c["b1"])
        centroid = nx.reshape(nx.matmul(hidden, c["w2"]) + c["b2"], (3,))
        return DecoderOutput(masks=masks, confidences=confidences, centroid=centroid, best_query=best)


def view_scores(masks: np.ndarray, confidences: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """conf[q] times the mean probability over pixels above threshold in each view."""
    above = masks > threshold
    counts = above.sum(axis=(2, 3))
    sums = np.where(above, masks, 0.0).sum(axis=(2, 3))
    mean_prob = np.divide(sums, counts, out=np.zeros_like(sums, dtype=np.float64), where=counts > 0)
    return confidences[:, None] * mean_prob


def select_mask(prediction: Prediction) -> Tuple[int, int]:
    """Highest-confidence query, then its best view. np.argmax keeps the lowest index on ties."""
    if prediction.confidences.size == 0:
        raise PreconditionError("Prediction has no queries")
    q = int(np.argmax(prediction.confidences))
    v = int(np.argmax(prediction.view_scores[q]))
    return q, v


def mask_iou(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, bool), np.asarray(target, bool)
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def query_ious(masks: np.ndarray, gt_masks: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """IoU of each query's binarized multi-view mask against the GT masks (V, H, W)."""
    return np.array([mask_iou(m > threshold, gt_masks) for m in masks])


def to_prediction(output: DecoderOutput, memory: EncoderMemory, threshold: float = 0.5) -> Prediction:
    masks = output.masks.value.astype(np.float64)
    confidences = output.confidences.value.astype(np.float64)
    scores = view_scores(masks, confidences, threshold)
    q = int(np.argmax(confidences))
    v = int(np.argmax(scores[q]))
    centroid, weight = mask_weighted_centroid(masks[q, v], memory.point_maps[v], return_weight=True)
    return Prediction(
        masks=masks, confidences=confidences, presence=float(confidences.max()),
        view_scores=scores, best_query=q, best_view=v, centroid=centroid,
        regressed_centroid=output.centroid.value.astype(np.float64), centroid_weight=weight,
    )


def decode(model: GasaModel, memory: EncoderMemory, text_embedding: np.ndarray,
           qualifier_index: int = 0) -> Prediction:
    """Inference: run the decoder without building a backward graph."""
    with nx.no_grad():
        output = model.forward(memory, text_embedding, qualifier_index)
    return to_prediction(output, memory)
