"""The PGCN network and its checkpoint format."""
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import (TransitionPair, init_adjustor, init_embeddings,
                    progressive_adjacency, self_adaptive_adjacency)

ADJACENCY_TERMS = ("T", "SA", "P")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    """Checkpoint does not fit the requested model; ``field`` names the culprit."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def parse_combo(value):
    """``"T+P"`` or ``{"T", "P"}`` -> frozenset, rejecting unknown terms."""
    if isinstance(value, str):
        items = [s.strip() for s in value.replace(",", "+").split("+") if s.strip()]
    else:
        items = list(value)
    combo = frozenset(items)
    bad = combo - set(ADJACENCY_TERMS)
    if bad:
        raise ConfigError(f"unknown adjacency terms {sorted(bad)}; choose from {ADJACENCY_TERMS}")
    if not combo:
        raise ConfigError("adjacency_combo must not be empty")
    return combo


def combo_key(combo):
    return "+".join(t for t in ADJACENCY_TERMS if t in combo)


@dataclass
class PGCNConfig:
    num_layers: int = 8
    hidden_dim: int = 32
    dilations: tuple = (1, 2, 1, 2, 1, 2, 1, 2)
    kernel_size: int = 2
    diffusion_steps: int = 2
    input_window: int = 12
    output_window: int = 12
    input_channels: int = 1
    skip_dim: int = 256
    end_dim: int = 512
    adjacency_combo: frozenset = field(default_factory=lambda: frozenset({"T", "P"}))
    embed_dim: int = 10
    literal_eq5: bool = False

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.adjacency_combo = parse_combo(self.adjacency_combo)
        if len(self.dilations) != self.num_layers:
            raise ConfigError(f"{len(self.dilations)} dilations given for {self.num_layers} layers")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        for name in ("kernel_size", "diffusion_steps", "hidden_dim", "input_window",
                     "output_window", "input_channels", "skip_dim", "end_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_items(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dilations":
                v = ",".join(str(d) for d in v)
            elif f.name == "adjacency_combo":
                v = combo_key(v)
            out[f.name] = str(v)
        return out

    @classmethod
    def from_items(cls, items):
        kwargs = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = str(items[f.name]).strip()
            if f.name == "dilations":
                kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif f.name == "adjacency_combo":
                kwargs[f.name] = raw
            elif f.name == "literal_eq5":
                kwargs[f.name] = raw.lower() in ("1", "true", "yes", "on")
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def receptive_field(config):
    return 1 + (config.kernel_size - 1) * sum(config.dilations)


@dataclass
class GraphInputs:
    """Adjacency matrices consumed by every layer of one forward pass."""

    transition: TransitionPair = None
    progressive: ad.Tensor = None
    adaptive: ad.Tensor = None


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class LayerWeights:
    """Parameters of one spatial-temporal layer."""

    def __init__(self, index, config, rng, directed=True):
        D, Pk, K = config.hidden_dim, config.kernel_size, config.diffusion_steps
        pre = f"layer{index}."
        self.filter = ad.Parameter(_uniform(rng, (Pk, D, D), Pk * D), pre + "filter")
        self.gate = ad.Parameter(_uniform(rng, (Pk, D, D), Pk * D), pre + "gate")
        self.diffusion = {}
        for term in diffusion_terms(config.adjacency_combo, directed):
            self.diffusion[term] = [
                ad.Parameter(_uniform(rng, (D, D), D), f"{pre}diffusion.{term}.{k}") for k in range(K)]
        self.graph_bias = ad.Parameter(np.zeros(D), pre + "graph_bias")
        self.residual = ad.Parameter(_uniform(rng, (D, D), D), pre + "residual")
        self.residual_bias = ad.Parameter(np.zeros(D), pre + "residual_bias")
        self.skip = ad.Parameter(_uniform(rng, (D, config.skip_dim), D), pre + "skip")
        self.skip_bias = ad.Parameter(np.zeros(config.skip_dim), pre + "skip_bias")

    def parameters(self):
        out = [self.filter, self.gate]
        for ws in self.diffusion.values():
            out.extend(ws)
        out += [self.graph_bias, self.residual, self.residual_bias, self.skip, self.skip_bias]
        return out


def diffusion_terms(combo, directed=True):
    """Ordered names of the diffusion terms, each carrying K weight matrices."""
    terms = []
    if "T" in combo:
        terms.append("forward")
        if directed:
            terms.append("backward")
    if "P" in combo:
        terms.append("progressive")
    if "SA" in combo:
        terms.append("adaptive")
    return terms


def _diffuse(matrix, Zf, K, literal=False):
    """Yield ``M^k Z`` for k = 0..K-1 (or ``M Z`` for every k when literal)."""
    if literal:
        once = ad.matmul(matrix, Zf)
        for _ in range(K):
            yield once
        return
    cur = Zf
    for k in range(K):
        if k > 0:
            cur = ad.matmul(matrix, cur)
        yield cur


def progressive_graph_convolution(Z, graphs, weights, K, combo, literal_eq5=False):
    """Sum of K-step diffusions over every active adjacency term.

    ``Z`` is ``(B, N, L, D)``; each term contributes ``M^k Z W_k`` at every
    temporal position independently. ``weights`` maps term name to its list
    of K matrices. An undirected transition pair drops the backward term.
    """
    combo = parse_combo(combo)
    B, N, L, D = Z.shape
    Zf = ad.reshape(Z, (B, N, L * D))
    mats = []
    if "T" in combo:
        trans = graphs.transition
        if trans is None:
            raise ConfigError("combo uses T but no transition matrices were supplied")
        mats.append(("forward", ad.Tensor(trans.forward), False))
        if not trans.undirected:
            mats.append(("backward", ad.Tensor(trans.backward), False))
    if "P" in combo:
        if graphs.progressive is None:
            raise ConfigError("combo uses P but no progressive adjacency was supplied")
        mats.append(("progressive", graphs.progressive, literal_eq5))
    if "SA" in combo:
        if graphs.adaptive is None:
            raise ConfigError("combo uses SA but no self-adaptive adjacency was supplied")
        mats.append(("adaptive", graphs.adaptive, False))
    out = None
    for name, M, literal in mats:
        if M.shape[-1] != N or M.shape[-2] != N:
            raise ad.DimensionError(f"{name} adjacency {M.shape} does not match {N} nodes")
        ws = weights[name]
        for k, diffused in enumerate(_diffuse(M, Zf, K, literal)):
            term = ad.matmul(ad.reshape(diffused, (B, N, L, D)), ws[k])
            out = term if out is None else out + term
    return out


def gated_temporal_unit(X, filter_kernel, gate_kernel, dilation):
    a = ad.dilated_causal_conv1d(X, filter_kernel, dilation)
    b = ad.dilated_causal_conv1d(X, gate_kernel, dilation)
    return ad.gated(a, b)


def st_layer_forward(X_in, layer, graphs, dilation, config):
    """One spatial-temporal layer; returns ``(X_out, skip_contribution)``.

    The skip contribution is taken from the last temporal position of the
    gated features; the residual is aligned to the most recent steps.
    """
    H = gated_temporal_unit(X_in, layer.filter, layer.gate, dilation)
    L_out = H.shape[2]
    G = progressive_graph_convolution(H, graphs, layer.diffusion, config.diffusion_steps,
                                      config.adjacency_combo, config.literal_eq5)
    G = G + layer.graph_bias
    skip = ad.matmul(ad.crop(H, 2, L_out - 1), layer.skip) + layer.skip_bias
    res = ad.crop(X_in, 2, X_in.shape[2] - L_out)
    res = ad.matmul(res, layer.residual) + layer.residual_bias
    return G + res, skip


class PGCNModel:
    """Stacked gated temporal convolutions and progressive graph convolutions.

    Input ``X`` is ``(B, T, N, C)`` in scaled units; output is ``(B, T', N)``.
    """

    def __init__(self, config, num_nodes, directed=True, seed=0):
        self.config = config
        self.num_nodes = int(num_nodes)
        self.directed = bool(directed)
        rng = np.random.default_rng(seed)
        C, D = config.input_channels, config.hidden_dim
        self.adjustor = init_adjustor(config.input_window, rng)
        self.embeddings = (init_embeddings(num_nodes, config.embed_dim, rng)
                           if "SA" in config.adjacency_combo else None)
        self.input_proj = ad.Parameter(_uniform(rng, (C, D), C), "input_proj")
        self.input_bias = ad.Parameter(np.zeros(D), "input_bias")
        self.layers = [LayerWeights(i, config, rng, directed) for i in range(config.num_layers)]
        self.head1 = ad.Parameter(_uniform(rng, (config.skip_dim, config.end_dim), config.skip_dim), "head1")
        self.head1_bias = ad.Parameter(np.zeros(config.end_dim), "head1_bias")
        self.head2 = ad.Parameter(_uniform(rng, (config.end_dim, config.output_window), config.end_dim), "head2")
        self.head2_bias = ad.Parameter(np.zeros(config.output_window), "head2_bias")

    def parameters(self):
        out = [self.adjustor]
        if self.embeddings is not None:
            out += [self.embeddings.source, self.embeddings.target]
        out += [self.input_proj, self.input_bias]
        for layer in self.layers:
            out += layer.parameters()
        out += [self.head1, self.head1_bias, self.head2, self.head2_bias]
        return out

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def build_graphs(self, X, transition=None):
        """Adjacency inputs for a batch; the progressive graph uses channel 0 of the raw window."""
        combo = self.config.adjacency_combo
        graphs = GraphInputs(transition=transition)
        if "P" in combo:
            windows = np.ascontiguousarray(np.transpose(np.asarray(X)[..., 0], (0, 2, 1)))
            graphs.progressive = progressive_adjacency(windows, self.adjustor).matrix
        if "SA" in combo:
            graphs.adaptive = self_adaptive_adjacency(self.embeddings)
        return graphs

    def padded_input(self, X):
        """``(B, N, T_pad, C)`` tensor, left zero-padded up to the receptive field."""
        X = np.asarray(X, dtype=np.float64)
        cfg = self.config
        if X.ndim != 4 or X.shape[1] != cfg.input_window or X.shape[3] != cfg.input_channels:
            raise ad.DimensionError(
                f"expected input (B, {cfg.input_window}, N, {cfg.input_channels}), got {X.shape}")
        if X.shape[2] != self.num_nodes:
            raise ad.DimensionError(f"model has {self.num_nodes} nodes, input has {X.shape[2]}")
        h = ad.Tensor(np.transpose(X, (0, 2, 1, 3)))
        return ad.pad_left(h, 2, receptive_field(cfg) - cfg.input_window)

    def temporal_stack(self, h, graphs):
        """Run the layers on a padded ``(B, N, T_pad, C)`` tensor.

        Returns ``(skip_sum, layer_outputs)``; ``layer_outputs[l]`` is the
        output of layer ``l`` whose last position aligns with the last input step.
        """
        h = ad.matmul(h, self.input_proj) + self.input_bias
        skip_sum = None
        outputs = []
        for layer, d in zip(self.layers, self.config.dilations):
            h, skip = st_layer_forward(h, layer, graphs, d, self.config)
            outputs.append(h)
            skip_sum = skip if skip_sum is None else skip_sum + skip
        return skip_sum, outputs

    def head(self, skip_sum):
        z = ad.relu(skip_sum)
        z = ad.relu(ad.matmul(z, self.head1) + self.head1_bias)
        return ad.matmul(z, self.head2) + self.head2_bias

    def forward(self, X, transition=None, graphs=None):
        if graphs is None:
            graphs = self.build_graphs(X, transition)
        skip_sum, _ = self.temporal_stack(self.padded_input(X), graphs)
        out = self.head(skip_sum)  # (B, N, 1, T')
        B, N = out.shape[0], out.shape[1]
        out = ad.reshape(out, (B, N, self.config.output_window))
        return ad.transpose(out, (0, 2, 1))

    __call__ = forward


def pgcn_forward(model, X, transition=None):
    return model.forward(X, transition)


def parameter_count(model):
    return int(sum(p.data.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"
BLOB = "params.bin"


def save_checkpoint(directory, model, meta=None):
    """Write ``manifest.txt`` (key=value) and ``params.bin`` (little-endian float64)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, v in model.config.to_items().items():
        lines.append(f"{k}={v}")
    lines.append(f"num_nodes={model.num_nodes}")
    lines.append(f"directed={int(model.directed)}")
    for k, v in (meta or {}).items():
        lines.append(f"{k}={v}")
    offset = 0
    chunks = []
    for p in model.parameters():
        shape = "x".join(str(s) for s in p.shape) or "scalar"
        lines.append(f"param.{p.name}={offset}:{shape}")
        chunk = p.data.astype("<f8").tobytes()
        chunks.append(chunk)
        offset += len(chunk)
    (directory / BLOB).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(directory):
    items = {}
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return items


def load_checkpoint(directory):
    """Rebuild the model from a checkpoint; returns ``(model, manifest_items)``."""
    directory = Path(directory)
    items = read_manifest(directory)
    config = PGCNConfig.from_items(items)
    model = PGCNModel(config, int(items["num_nodes"]), directed=items.get("directed", "1") == "1")
    blob = (directory / BLOB).read_bytes()
    params = model.named_parameters()
    stored = {k[len("param."):]: v for k, v in items.items() if k.startswith("param.")}
    missing = set(params) - set(stored)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}", field=sorted(missing)[0])
    for name, spec in stored.items():
        if name not in params:
            raise CheckpointError(f"checkpoint parameter {name!r} is not part of the configured model", field=name)
        off, _, shape_s = spec.partition(":")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        p = params[name]
        if shape != p.shape:
            raise CheckpointError(f"parameter {name!r}: stored shape {shape} != configured {p.shape}", field=name)
        start = int(off)
        arr = np.frombuffer(blob, dtype="<f8", count=p.data.size, offset=start)
        p.data[...] = arr.reshape(shape)
    return model, items
