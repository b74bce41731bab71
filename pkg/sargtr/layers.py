'''The trainable graph transformer stack.

Weights are stored input-major, so a layer computes X @ W for row-stacked
features X. A batch of graphs is evaluated as one disjoint union: segment ids
are offset per graph and no edge crosses graphs, so every graph is processed
independently of the others in its batch.

Directed edge (i -> j) always means neighbor i feeding center node j; softmax
neighborhoods are the segments grouped by j.
'''
import dataclasses
import hashlib
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .asc_graph import (AUTO, CONTINUOUS_COLUMNS, DiscreteCodebook, ScatterGraph, alpha_indices,
                        build_graph, record_to_centers)
from .autodiff import (SegmentIndex, Tape, Tensor, add, concat, embedding_lookup, layer_norm,
                       leaky_relu, matmul, mul, relu, row_sum, scalar_mul, segment_mean,
                       segment_softmax, segment_sum)
from .encodings import epe_closed_form, epe_simulate, gne
from .exceptions import CheckpointException, ShapeMismatchException, ValidationException
from .schema import DatasetRecord

logger = logging.getLogger(__name__)

EPE_MODES = ("closed_form", "simulate")


@dataclass(frozen=True)
class ModelConfig:
    '''
    Architecture and input-pipeline settings. Everything that shapes ModelParams lives here.

    Args:
        d_n (int): node embedding width
        d_e (int): edge embedding width
        d_h (int): per-head width in the transformer layers
        heads (int): attention heads per transformer layer
        mpm_layers (int): edge-enhanced message-passing layers, applied first
        transformer_layers (int): edge-enhanced transformer layers, applied after MPM
        mpm_hidden (int): width d of the MPM scoring projection
        gne_n (int): eigenvectors per node; padded with zeros when K is smaller
        leaky_slope (float): negative slope of the MPM scoring LeakyReLU
        codebook (DiscreteCodebook): alpha values for the discrete mapping
        class_count (int): number of target classes
        dvm_embed_dim (int): rows width of the alpha embedding table
        dvm_out_dim (int): width after the DVM dimension adjustment
        sigma_d: kernel bandwidth used when building graphs, or "auto"
        gne_weighted (bool): build the GNE Laplacian from kernel weights
        epe_mode (str): "closed_form" or "simulate"
        epe_walks (int), epe_walk_length (int): walk budget when epe_mode is "simulate"
        layer_norm_eps (float): epsilon of every layer norm
        use_dvm, edge_enhance, use_gne, use_epe (bool): module switches used by ablations
        feature_mean, feature_std (tuple): standardization statistics of the continuous columns
    '''
    d_n: int = 64
    d_e: int = 16
    d_h: int = 16
    heads: int = 4
    mpm_layers: int = 1
    transformer_layers: int = 2
    mpm_hidden: int = 64
    gne_n: int = 8
    leaky_slope: float = 0.2
    codebook: DiscreteCodebook = field(default_factory=DiscreteCodebook)
    class_count: int = 3
    dvm_embed_dim: int = 8
    dvm_out_dim: int = 8
    sigma_d: Union[float, str] = AUTO
    gne_weighted: bool = False
    epe_mode: str = "closed_form"
    epe_walks: int = 200
    epe_walk_length: int = 50
    layer_norm_eps: float = 1e-5
    use_dvm: bool = True
    edge_enhance: bool = True
    use_gne: bool = True
    use_epe: bool = True
    feature_mean: Optional[Tuple[float, ...]] = None
    feature_std: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        for name in ("d_n", "d_e", "d_h", "heads", "mpm_hidden", "gne_n", "dvm_embed_dim",
                     "dvm_out_dim", "epe_walks", "epe_walk_length"):
            if getattr(self, name) < 1:
                raise ValidationException(f"{name} must be at least 1, got {getattr(self, name)}.")
        if self.mpm_layers < 0 or self.transformer_layers < 0:
            raise ValidationException("Layer counts must be non-negative.")
        if self.class_count < 2:
            raise ValidationException(f"class_count must be at least 2, got {self.class_count}.")
        if self.epe_mode not in EPE_MODES:
            raise ValidationException(f"epe_mode must be one of {EPE_MODES}, got {self.epe_mode!r}.")
        if self.layer_norm_eps <= 0:
            raise ValidationException("layer_norm_eps must be positive.")
        if isinstance(self.codebook, dict):
            object.__setattr__(self, "codebook", DiscreteCodebook(**self.codebook))
        for name in ("feature_mean", "feature_std"):
            stats = getattr(self, name)
            if stats is not None:
                stats = tuple(float(v) for v in stats)
                if len(stats) != self.continuous_width:
                    raise ValidationException(
                        f"{name} has {len(stats)} entries for {self.continuous_width} continuous columns.")
                object.__setattr__(self, name, stats)
        if self.feature_std is not None and any(s <= 0 for s in self.feature_std):
            raise ValidationException("feature_std entries must be positive.")

    @property
    def continuous_columns(self) -> Tuple[int, ...]:
        '''H0 columns fed as continuous inputs; alpha joins them when DVM is off.'''
        return CONTINUOUS_COLUMNS if self.use_dvm else tuple(range(7))

    @property
    def continuous_width(self) -> int:
        return len(self.continuous_columns)

    @property
    def node_input_width(self) -> int:
        return self.continuous_width + (self.dvm_out_dim if self.use_dvm else 0) + self.gne_n

    @property
    def has_stats(self) -> bool:
        return self.feature_mean is not None and self.feature_std is not None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValidationException(f"Unknown ModelConfig keys: {sorted(unknown)}.")
        values = dict(values)
        if isinstance(values.get("codebook"), dict):
            values["codebook"] = DiscreteCodebook(**values["codebook"])
        for name in ("feature_mean", "feature_std"):
            if values.get(name) is not None:
                values[name] = tuple(values[name])
        return cls(**values)


##############
# Parameters #
##############

def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    '''Name and shape of every trainable array, in a fixed order.'''
    shapes = OrderedDict()
    edge = config.edge_enhance
    if config.use_dvm:
        shapes["dvm.W_emb"] = (config.codebook.size, config.dvm_embed_dim)
        shapes["dvm.W_adj"] = (config.dvm_embed_dim, config.dvm_out_dim)
    shapes["embed.W_n"] = (config.node_input_width, config.d_n)
    shapes["embed.b_n"] = (config.d_n,)
    shapes["embed.W_e"] = (2, config.d_e)
    shapes["embed.b_e"] = (config.d_e,)

    for layer in range(config.mpm_layers):
        prefix = f"mpm{layer}"
        shapes[f"{prefix}.W_ij"] = (2 * config.d_n + (config.d_e if edge else 0), config.mpm_hidden)
        shapes[f"{prefix}.w_ij"] = (config.mpm_hidden, 1)
        shapes[f"{prefix}.W_agg"] = (config.d_n, config.d_n)
        if edge:
            shapes[f"{prefix}.W_e"] = (config.d_e, config.d_e)

    query = 2 * config.d_h if edge else config.d_h
    for layer in range(config.transformer_layers):
        prefix = f"tf{layer}"
        for head in range(config.heads):
            hp = f"{prefix}.h{head}"
            shapes[f"{hp}.W_qn"] = (config.d_n, config.d_h)
            if edge:
                shapes[f"{hp}.W_qe"] = (config.d_e, config.d_h)
            shapes[f"{hp}.W_k"] = (config.d_n, config.d_h)
            shapes[f"{hp}.W_vn"] = (config.d_n, config.d_h)
            if edge:
                shapes[f"{hp}.W_ve"] = (config.d_e, config.d_h)
            shapes[f"{hp}.W_s"] = (query, config.d_h)
            shapes[f"{hp}.W_z"] = (query, config.d_h)
        shapes[f"{prefix}.W_on"] = (config.heads * config.d_h, config.d_n)
        shapes[f"{prefix}.ln_n.gamma"] = (config.d_n,)
        shapes[f"{prefix}.ln_n.beta"] = (config.d_n,)
        if edge:
            shapes[f"{prefix}.W_oe"] = (config.heads * config.d_h, config.d_e)
            shapes[f"{prefix}.ln_e.gamma"] = (config.d_e,)
            shapes[f"{prefix}.ln_e.beta"] = (config.d_e,)

    shapes["cls.W"] = (config.d_n, config.class_count)
    shapes["cls.b"] = (config.class_count,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape in param_shapes(config).values()))


@dataclass
class ModelParams:
    '''Named trainable arrays for one ModelConfig.'''
    arrays: "OrderedDict[str, np.ndarray]"

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((name, value.copy()) for name, value in self.arrays.items()))

    def count(self) -> int:
        return int(sum(value.size for value in self.arrays.values()))


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    '''Glorot-uniform matrices, zero biases, unit layer-norm gains.'''
    rng = np.random.default_rng(seed)
    arrays = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            arrays[name] = np.ones(shape)
        elif name.endswith(".beta") or len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(arrays)


def check_params(config: ModelConfig, params: ModelParams):
    '''Raise CheckpointException unless params carry exactly the arrays config requires.'''
    expected = param_shapes(config)
    if list(expected) != list(params.arrays):
        missing = sorted(set(expected) - set(params.arrays))
        extra = sorted(set(params.arrays) - set(expected))
        raise CheckpointException(f"Parameters do not match the configuration (missing {missing}, extra {extra}).")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointException(f"{name} has shape {params[name].shape}, the configuration needs {shape}.")


def bind_params(tape: Tape, params: ModelParams, trainable: bool = True) -> Dict[str, Tensor]:
    if trainable:
        return {name: tape.param(name, value) for name, value in params.items()}
    return {name: tape.constant(value, name) for name, value in params.items()}


##########
# Inputs #
##########

class PreparedGraph(NamedTuple):
    '''Model inputs for one graph, independent of the trainable parameters.'''
    features: np.ndarray
    alpha: np.ndarray
    gne: np.ndarray
    edge_attr: np.ndarray
    edges: np.ndarray
    label: int


class GraphBatch(NamedTuple):
    '''Disjoint union of prepared graphs.'''
    features: np.ndarray
    alpha: np.ndarray
    gne: np.ndarray
    edge_attr: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_of_node: np.ndarray
    labels: np.ndarray

    @property
    def num_graphs(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def centers(self) -> SegmentIndex:
        return SegmentIndex(self.dst, self.num_nodes)

    @property
    def graphs(self) -> SegmentIndex:
        return SegmentIndex(self.graph_of_node, self.num_graphs)


def walk_seed(graph: ScatterGraph, seed: int = 0) -> int:
    '''Seed for simulated walks on graph, derived from its features so it does not depend on
    where the record sits in a dataset.'''
    digest = hashlib.sha256(str(int(seed)).encode("ascii"))
    digest.update(np.ascontiguousarray(graph.features, dtype=np.float64).tobytes())
    return int.from_bytes(digest.digest()[:8], "little")


def prepare_graph(graph: Union[ScatterGraph, DatasetRecord], config: ModelConfig,
                  label: int = -1, seed: int = 0) -> PreparedGraph:
    '''Build the graph if needed and compute its alpha codes, GNE block and edge attributes.

    Args:
        graph: a ScatterGraph or a dataset record (its label is used)
        config (ModelConfig): pipeline settings
        label (int): label for a bare ScatterGraph; -1 when unknown
        seed (int): base walk seed when epe_mode is "simulate", combined with the graph content
    '''
    if isinstance(graph, dict):
        label = int(graph["label"])
        graph = build_graph(record_to_centers(graph), config.sigma_d)

    if config.use_gne:
        encoding = gne(graph, config.gne_n, weighted=config.gne_weighted, drop_degenerate=True)
    else:
        encoding = np.zeros((graph.num_nodes, config.gne_n))

    if not config.use_epe:
        epe = np.zeros(graph.num_edges)
    elif config.epe_mode == "simulate":
        _, epe = epe_simulate(graph, config.epe_walks, config.epe_walk_length, walk_seed(graph, seed))
    else:
        epe = epe_closed_form(graph)

    return PreparedGraph(features=graph.features.copy(),
                         alpha=alpha_indices(graph.features, config.codebook),
                         gne=encoding,
                         edge_attr=np.stack([graph.weights, epe], axis=1),
                         edges=graph.edges.copy(),
                         label=label)


def make_batch(graphs: Sequence[PreparedGraph]) -> GraphBatch:
    if not graphs:
        raise ValidationException("A batch needs at least one graph.")
    features, alpha, encodings, edge_attr, src, dst, owner, labels = [], [], [], [], [], [], [], []
    offset = 0
    for index, g in enumerate(graphs):
        k = g.features.shape[0]
        features.append(g.features)
        alpha.append(g.alpha)
        encodings.append(g.gne)
        # both directed copies carry the unordered edge's attributes
        edge_attr.extend([g.edge_attr, g.edge_attr])
        src.extend([g.edges[:, 0] + offset, g.edges[:, 1] + offset])
        dst.extend([g.edges[:, 1] + offset, g.edges[:, 0] + offset])
        owner.append(np.full(k, index, dtype=np.int64))
        labels.append(g.label)
        offset += k
    return GraphBatch(features=np.concatenate(features), alpha=np.concatenate(alpha),
                      gne=np.concatenate(encodings), edge_attr=np.concatenate(edge_attr),
                      src=np.concatenate(src), dst=np.concatenate(dst),
                      graph_of_node=np.concatenate(owner), labels=np.asarray(labels, dtype=np.int64))


def fit_standardization(graphs: Sequence[PreparedGraph], config: ModelConfig) -> ModelConfig:
    '''Per-column z-score statistics of the continuous inputs; zero spread maps to 1.'''
    if not graphs:
        raise ValidationException("Cannot fit standardization on an empty set.")
    columns = list(config.continuous_columns)
    stacked = np.concatenate([g.features[:, columns] for g in graphs])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return dataclasses.replace(config, feature_mean=tuple(mean.tolist()), feature_std=tuple(std.tolist()))


##########
# Layers #
##########

def _as_batch(inputs: Union[GraphBatch, PreparedGraph]) -> GraphBatch:
    return inputs if isinstance(inputs, GraphBatch) else make_batch([inputs])


def dvm_embed(alpha_indices: np.ndarray, W_emb: Tensor, W_adj: Optional[Tensor] = None) -> Tensor:
    '''ReLU(W_emb[s_alpha]) followed by the optional linear dimension adjustment.'''
    embedded = relu(embedding_lookup(W_emb, alpha_indices))
    return matmul(embedded, W_adj) if W_adj is not None else embedded


def init_embeddings(batch: GraphBatch, config: ModelConfig, p: Dict[str, Tensor]) -> Tuple[Tensor, Tensor]:
    '''Initial node embeddings H and directed-edge embeddings E.'''
    if not config.has_stats:
        raise ValidationException("The model configuration has no standardization statistics.")
    tape = p["embed.W_n"].tape
    raw = batch.features[:, list(config.continuous_columns)]
    standardized = (raw - np.asarray(config.feature_mean)) / np.asarray(config.feature_std)

    parts = [tape.constant(standardized)]
    if config.use_dvm:
        parts.append(dvm_embed(batch.alpha, p["dvm.W_emb"], p["dvm.W_adj"]))
    parts.append(tape.constant(batch.gne if config.use_gne else np.zeros_like(batch.gne)))
    h = add(matmul(concat(parts), p["embed.W_n"]), p["embed.b_n"])

    edge_attr = batch.edge_attr if config.use_epe else batch.edge_attr * np.array([1.0, 0.0])
    e = add(matmul(tape.constant(edge_attr), p["embed.W_e"]), p["embed.b_e"])
    return h, e


def mpm_layer(h: Tensor, e: Tensor, batch: GraphBatch, p: Dict[str, Tensor], prefix: str,
              config: ModelConfig, trace: Optional[list] = None) -> Tuple[Tensor, Tensor]:
    '''Edge-enhanced message passing.

    alpha_ij = softmax over i in N(j) of w_ij . LeakyReLU([h_i | h_j | e_ij] W_ij)
    h'_j = sum_i alpha_ij h_i W_agg;  e'_ij = e_ij + (alpha_ij e_ij) W_e
    '''
    if h.shape[1] != config.d_n or e.shape[1] != config.d_e:
        raise ShapeMismatchException(f"{prefix}: got H {h.shape} and E {e.shape} for d_n={config.d_n}, d_e={config.d_e}.")
    centers = batch.centers
    parts = [embedding_lookup(h, batch.src), embedding_lookup(h, batch.dst)]
    if config.edge_enhance:
        parts.append(e)
    hidden = leaky_relu(matmul(concat(parts), p[f"{prefix}.W_ij"]), config.leaky_slope)
    alpha = segment_softmax(matmul(hidden, p[f"{prefix}.w_ij"]), centers)
    if trace is not None:
        trace.append((prefix, alpha.data.copy()))

    messages = mul(alpha, embedding_lookup(matmul(h, p[f"{prefix}.W_agg"]), batch.src))
    h_out = segment_sum(messages, centers)
    if not config.edge_enhance:
        return h_out, e
    return h_out, add(e, matmul(mul(alpha, e), p[f"{prefix}.W_e"]))


def transformer_layer(h: Tensor, e: Tensor, batch: GraphBatch, p: Dict[str, Tensor], prefix: str,
                      config: ModelConfig, trace: Optional[list] = None) -> Tuple[Tensor, Tensor]:
    '''Edge-enhanced multi-head attention with residual and post layer norm.

    Per head the query joins the center's node query with the edge query, keys and node
    values come from the neighbor, and the edge value feeds both outputs:
        s_ij = softmax over i in N(j) of ([q_n(j) | q_e(ij)] W_s) . k(i) / sqrt(d_h)
        e_ij = s_ij v_e(ij);  z_j = sum_i s_ij [v_n(i) | v_e(ij)] W_z
    '''
    if h.shape[1] != config.d_n or e.shape[1] != config.d_e:
        raise ShapeMismatchException(f"{prefix}: got H {h.shape} and E {e.shape} for d_n={config.d_n}, d_e={config.d_e}.")
    if p[f"{prefix}.W_on"].shape[0] != config.heads * config.d_h:
        raise ShapeMismatchException(f"{prefix}: output projection does not match heads * d_h.")
    centers = batch.centers
    scale = 1.0 / math.sqrt(config.d_h)
    node_heads, edge_heads = [], []

    for head in range(config.heads):
        hp = f"{prefix}.h{head}"
        q = embedding_lookup(matmul(h, p[f"{hp}.W_qn"]), batch.dst)
        k = embedding_lookup(matmul(h, p[f"{hp}.W_k"]), batch.src)
        v = embedding_lookup(matmul(h, p[f"{hp}.W_vn"]), batch.src)
        if config.edge_enhance:
            v_e = matmul(e, p[f"{hp}.W_ve"])
            q = concat([q, matmul(e, p[f"{hp}.W_qe"])])
            v = concat([v, v_e])
        score = scalar_mul(row_sum(mul(matmul(q, p[f"{hp}.W_s"]), k)), scale)
        s = segment_softmax(score, centers)
        if trace is not None:
            trace.append((hp, s.data.copy()))

        node_heads.append(segment_sum(mul(s, matmul(v, p[f"{hp}.W_z"])), centers))
        if config.edge_enhance:
            edge_heads.append(mul(s, v_e))

    eps = config.layer_norm_eps
    h_sum = add(h, matmul(concat(node_heads), p[f"{prefix}.W_on"]))
    h_out = layer_norm(h_sum, p[f"{prefix}.ln_n.gamma"], p[f"{prefix}.ln_n.beta"], eps)
    if not config.edge_enhance:
        return h_out, e
    e_sum = add(e, matmul(concat(edge_heads), p[f"{prefix}.W_oe"]))
    return h_out, layer_norm(e_sum, p[f"{prefix}.ln_e.gamma"], p[f"{prefix}.ln_e.beta"], eps)


def readout(h: Tensor, graphs: Optional[SegmentIndex] = None) -> Tensor:
    '''Mean of node rows per graph; a single graph when graphs is None.'''
    if graphs is None:
        graphs = SegmentIndex(np.zeros(h.shape[0], dtype=np.int64), 1)
    return segment_mean(h, graphs)


def model_forward(inputs: Union[GraphBatch, PreparedGraph], config: ModelConfig,
                  p: Union[Dict[str, Tensor], ModelParams], tape: Optional[Tape] = None,
                  trace: Optional[list] = None) -> Tensor:
    '''Class logits, one row per graph.

    Args:
        inputs: a prepared graph or a batch of them
        config (ModelConfig): the architecture
        p: tensors bound on a tape, or ModelParams (bound as constants on tape)
        tape (Tape, optional): tape used when p is ModelParams
        trace (list, optional): receives (layer name, attention weights) pairs

    Returns:
        Tensor: (graphs, class_count) logits
    '''
    batch = _as_batch(inputs)
    if isinstance(p, ModelParams):
        check_params(config, p)
        p = bind_params(tape if tape is not None else Tape(), p, trainable=False)

    h, e = init_embeddings(batch, config, p)
    for layer in range(config.mpm_layers):
        h, e = mpm_layer(h, e, batch, p, f"mpm{layer}", config, trace)
    for layer in range(config.transformer_layers):
        h, e = transformer_layer(h, e, batch, p, f"tf{layer}", config, trace)
    pooled = readout(h, batch.graphs)
    return add(matmul(pooled, p["cls.W"]), p["cls.b"])
