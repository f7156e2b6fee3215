"""Equivariant message-passing potential with attention-gated messages.

Node features carry one block per rotation order l up to l_max. Each
layer sends, along every edge, the sender's scalar channels modulated by
learned radial functions and by the real spherical harmonics of the edge
direction; messages are scaled by the spherical-attention gate, summed
over neighbors in ascending edge order, mixed per order, and added as a
residual. Energy reads out the final scalar block plus per-species
reference energies, so it is exactly invariant under rigid motions when
gating is off; gates introduce a controlled, grid-refinable deviation.

Forces are the negative position gradient through the whole pipeline,
including the field, the attention, and the gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import attention as attn_mod
from . import field as field_mod
from .geometry import NeighborList, build_equiangular_grid, neighbor_list, sh_index

DEFAULT_CONFIG: dict = {
    "cutoff": 5.0,
    "l_max": 2,
    "layers": 2,
    "channels": 32,
    "n_bessel": 8,
    "envelope_p": 6,
    "grid": (4, 8),
    "d": 16,
    "heads": 1,
    "field_mode": "scalar",
    "gating": True,
    "positional_encoding": True,
    "learnable": True,
    "gate_activation": "logistic",
}

MARA_NAMES = (
    "wq_node", "wk_node", "wv_node", "wq_field", "wk_field", "wv_field",
    "pos", "gate_w", "gate_b",
)


@dataclass
class AtomicConfiguration:
    """One structure: atomic numbers, positions, optional labels."""

    species: np.ndarray  # (n,) atomic numbers
    positions: np.ndarray  # (n, 3) Angstrom
    energy: float | None = None
    forces: np.ndarray | None = None
    edge_features: np.ndarray | None = None  # accepted, unused by the model
    extra: dict = dc_field(default_factory=dict)  # passthrough comment fields

    def __post_init__(self):
        self.species = np.asarray(self.species, dtype=int)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.species.ndim != 1 or self.positions.shape != (len(self.species), 3):
            raise ValueError("species must be (n,) and positions (n, 3)")
        if len(self.species) == 0:
            raise ValueError("configuration must contain at least one atom")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        if self.energy is not None:
            self.energy = float(self.energy)
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=float)
            if self.forces.shape != self.positions.shape:
                raise ValueError("forces must match positions in shape")

    @property
    def n_atoms(self) -> int:
        return len(self.species)


@dataclass
class EquivariantFeatures:
    """Per-atom feature blocks, one (n_atoms, 2l+1, channels) array per order."""

    blocks: dict[int, np.ndarray]

    def __post_init__(self):
        ls = sorted(self.blocks)
        if ls != list(range(len(ls))):
            raise ValueError("blocks must cover l = 0..l_max without gaps")
        n, c = self.blocks[0].shape[0], self.blocks[0].shape[2]
        for l, b in self.blocks.items():
            if b.shape != (n, 2 * l + 1, c):
                raise ValueError(f"block l={l} has shape {b.shape}")

    @property
    def l_max(self) -> int:
        return max(self.blocks)


@dataclass
class ModelState:
    """Model configuration plus a flat name -> array parameter table."""

    config: dict
    params: dict[str, np.ndarray]

    def copy(self) -> "ModelState":
        return ModelState(dict(self.config), {k: v.copy() for k, v in self.params.items()})


def species_vocab(species_numbers) -> list[int]:
    return sorted({int(z) for z in species_numbers})


def new_model(species, seed: int = 0, random_gate: bool = False, **overrides) -> ModelState:
    """Freshly initialized model over a species vocabulary.

    Projections start uniform at 1/sqrt(fan-in), positional embeddings
    N(0, 0.02), gate weights zero (gates open at 0.5), reference
    energies zero until calibrated against a training set. random_gate
    draws nonzero gate weights instead, for probing runs where a
    constant gate would make the measurement vacuous.
    """
    config = dict(DEFAULT_CONFIG)
    unknown = set(overrides) - set(config)
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    config.update(overrides)
    config["species"] = species_vocab(species)
    config["grid"] = tuple(config["grid"])
    config["seed"] = int(seed)

    rng = np.random.default_rng(seed)
    ns = len(config["species"])
    c = config["channels"]
    lmax = config["l_max"]
    n_orders = lmax + 1
    nb = config["n_bessel"]
    d_f = field_mod.parse_feature_mode(config["field_mode"])
    grid = build_equiangular_grid(*config["grid"])

    params: dict[str, np.ndarray] = {
        "embed": rng.normal(0.0, 1.0 / np.sqrt(c), size=(ns, c)),
        "ref_energy": np.zeros(ns),
        "readout": rng.normal(0.0, 1.0 / np.sqrt(c), size=c),
    }
    br = 1.0 / np.sqrt(nb)
    bc = 1.0 / np.sqrt(c)
    for t in range(config["layers"]):
        params[f"layer{t}.radial"] = rng.uniform(-br, br, size=(n_orders * c, nb))
        for j in range(n_orders):
            params[f"layer{t}.mix{j}"] = rng.uniform(-bc, bc, size=(c, c))
        mara = attn_mod.init_mara_params(
            rng, config["d"], c, d_f, grid.n_points,
            heads=config["heads"],
            positional_encoding=config["positional_encoding"],
            learnable=config["learnable"],
            gate_activation=config["gate_activation"],
            random_gate=random_gate,
        )
        for name in MARA_NAMES:
            params[f"layer{t}.attn.{name}"] = np.asarray(getattr(mara, name), dtype=float)
    return ModelState(config, params)


def model_grid(state: ModelState):
    return build_equiangular_grid(*state.config["grid"])


def mara_view(params: dict, layer: int, config: dict) -> attn_mod.MaraParams:
    """MaraParams view over a parameter table (arrays or autodiff nodes)."""
    return attn_mod.MaraParams(
        **{n: params[f"layer{layer}.attn.{n}"] for n in MARA_NAMES},
        heads=config["heads"],
        positional_encoding=config["positional_encoding"],
        learnable=config["learnable"],
        gate_activation=config["gate_activation"],
    )


def param_nodes(state: ModelState) -> dict[str, ad.Node]:
    return {k: ad.leaf(v) for k, v in state.params.items()}


def radial_basis(r, r_c: float, n: int, envelope_p: int | None = 6):
    """Sine Bessel basis sqrt(2/r_c) sin(m pi r / r_c)/r times a cutoff envelope.

    The polynomial envelope u(x) = 1 - (p+1)(p+2)/2 x^p + p(p+2) x^(p+1)
    - p(p+1)/2 x^(p+2) equals 1 at 0 and vanishes to second order at the
    cutoff; ``envelope_p=None`` disables it. Values are exactly zero for
    r >= r_c. Accepts any batch shape; returns (..., n).
    """
    if n < 1:
        raise ValueError("need at least one basis function")
    if r_c <= 0:
        raise ValueError("cutoff must be positive")
    taped = isinstance(r, ad.Node)
    rn = ad.as_node(r)
    if np.any(rn.value <= 0):
        raise ValueError("radial basis requires r > 0")
    rr = ad.reshape(rn, rn.value.shape + (1,))
    m = ad.constant(np.arange(1, n + 1, dtype=float))
    b = ad.div(ad.mul(ad.sin(ad.mul(rr, ad.mul(m, np.pi / r_c))), np.sqrt(2.0 / r_c)), rr)
    if envelope_p is not None:
        p = int(envelope_p)
        x = ad.mul(rr, 1.0 / r_c)
        xp = ad.pow_const(x, p)
        u = ad.add(
            ad.add(1.0, ad.mul(xp, -(p + 1) * (p + 2) / 2.0)),
            ad.add(
                ad.mul(ad.mul(xp, x), float(p * (p + 2))),
                ad.mul(ad.mul(xp, ad.mul(x, x)), -p * (p + 1) / 2.0),
            ),
        )
        b = ad.mul(b, u)
    inside = np.broadcast_to(rr.value < r_c, b.value.shape)
    out = ad.where_mask(inside, b, ad.constant(np.zeros(())))
    return out if taped else out.value


_SH_C = {
    0: 0.28209479177387814,
    1: 0.4886025119029199,
    "2a": 1.0925484305920792, "2b": 0.31539156525252005, "2c": 0.5462742152960396,
    "3a": 0.5900435899266435, "3b": 2.890611442640554, "3c": 0.4570457994644658,
    "3d": 0.3731763325901154, "3e": 1.445305721320277,
}


def taped_harmonics(l_max: int, rhat: ad.Node) -> ad.Node:
    """Real spherical harmonics of unit vectors as a differentiable node.

    Same Cartesian polynomials and ordering as
    geometry.real_spherical_harmonics; rhat has shape (e, 3).
    """
    if not 0 <= l_max <= 3:
        raise ValueError("l_max must be in [0, 3]")
    e = rhat.value.shape[0]
    x = ad.take(rhat, (slice(None), 0))
    y = ad.take(rhat, (slice(None), 1))
    z = ad.take(rhat, (slice(None), 2))
    cols = [ad.constant(np.full(e, _SH_C[0]))]
    if l_max >= 1:
        cols += [ad.mul(y, _SH_C[1]), ad.mul(z, _SH_C[1]), ad.mul(x, _SH_C[1])]
    if l_max >= 2:
        x2, y2, z2 = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
        cols += [
            ad.mul(ad.mul(x, y), _SH_C["2a"]),
            ad.mul(ad.mul(y, z), _SH_C["2a"]),
            ad.mul(ad.sub(ad.mul(z2, 2.0), ad.add(x2, y2)), _SH_C["2b"]),
            ad.mul(ad.mul(x, z), _SH_C["2a"]),
            ad.mul(ad.sub(x2, y2), _SH_C["2c"]),
        ]
    if l_max >= 3:
        cols += [
            ad.mul(ad.mul(y, ad.sub(ad.mul(x2, 3.0), y2)), _SH_C["3a"]),
            ad.mul(ad.mul(ad.mul(x, y), z), _SH_C["3b"]),
            ad.mul(ad.mul(y, ad.sub(ad.mul(z2, 4.0), ad.add(x2, y2))), _SH_C["3c"]),
            ad.mul(ad.mul(z, ad.sub(ad.mul(z2, 2.0), ad.mul(ad.add(x2, y2), 3.0))), _SH_C["3d"]),
            ad.mul(ad.mul(x, ad.sub(ad.mul(z2, 4.0), ad.add(x2, y2))), _SH_C["3c"]),
            ad.mul(ad.mul(z, ad.sub(x2, y2)), _SH_C["3e"]),
            ad.mul(ad.mul(x, ad.sub(x2, ad.mul(y2, 3.0))), _SH_C["3a"]),
        ]
    cols = [ad.reshape(cc, (e, 1)) for cc in cols]
    return ad.concat(cols, axis=1)


def _species_index(species: np.ndarray, vocab: list[int]) -> np.ndarray:
    varr = np.asarray(vocab)
    idx = np.searchsorted(varr, species)
    bad = (idx >= len(varr)) | (varr[np.clip(idx, 0, len(varr) - 1)] != species)
    if np.any(bad):
        raise ValueError(f"species {sorted(set(species[bad].tolist()))} not in model vocabulary {vocab}")
    return idx


def _forward_blocks(
    positions: ad.Node,
    species_idx: np.ndarray,
    edges: np.ndarray,
    cfg: dict,
    params: dict,
    gate_override: float | None = None,
    gate_trace: list | None = None,
) -> dict[int, ad.Node]:
    """Feature blocks after all layers, as nodes over the parameter table."""
    n = len(species_idx)
    lmax = cfg["l_max"]
    c = cfg["channels"]
    grid = build_equiangular_grid(*cfg["grid"])

    embed = ad.as_node(params["embed"])
    h = {0: ad.take(embed, (species_idx,))}
    h[0] = ad.reshape(h[0], (n, 1, c))
    for l in range(1, lmax + 1):
        h[l] = ad.constant(np.zeros((n, 2 * l + 1, c)))

    if len(edges):
        recv, send = edges[:, 0], edges[:, 1]
        ne = len(edges)
        xi = ad.take(positions, (recv,))
        xj = ad.take(positions, (send,))
        rvec = ad.sub(xj, xi)
        r = ad.norm(rvec, axis=-1)  # (E,)
        rhat = ad.div(rvec, ad.reshape(r, (ne, 1)))
        ylm = taped_harmonics(lmax, rhat)  # (E, (lmax+1)^2)
        basis = radial_basis(r, cfg["cutoff"], cfg["n_bessel"], cfg["envelope_p"])

        for t in range(cfg["layers"]):
            radial = ad.matmul(basis, ad.transpose(ad.as_node(params[f"layer{t}.radial"])))
            radial = ad.reshape(radial, (ne, lmax + 1, c))
            scalars = ad.reshape(h[0], (n, c))
            s_j = ad.reshape(ad.take(scalars, (send,)), (ne, 1, c))

            alpha = pooled = None
            if cfg["gating"]:
                if gate_override is not None:
                    alpha = ad.constant(np.full(ne, float(gate_override)))
                else:
                    mara = mara_view(
                        {k: params[k] for k in params if k.startswith(f"layer{t}.attn.")},
                        t, cfg,
                    )
                    f = field_mod.grid_field(xi, xj, grid)
                    ff = field_mod.field_features(f, cfg["field_mode"])
                    af = attn_mod.build_qkv(
                        ad.take(scalars, (recv,)), ad.take(scalars, (send,)), ff, mara
                    )
                    out = attn_mod.spherical_attention(af, grid, heads=cfg["heads"])
                    pooled = attn_mod.pool_attention(out, grid)
                    z = attn_mod.gate_preactivation(pooled, mara)
                    alpha = attn_mod.gate_activation(z, mara.gate_activation)
            if gate_trace is not None:
                gate_trace.append({
                    "alpha": np.ones(ne) if alpha is None else np.array(alpha.value, dtype=float),
                    "pooled_norm": np.zeros(ne) if pooled is None else np.linalg.norm(pooled.value, axis=-1),
                })

            new_h = {}
            for j in range(lmax + 1):
                yj = ad.reshape(ad.take(ylm, (slice(None), slice(j * j, (j + 1) * (j + 1)))), (ne, 2 * j + 1, 1))
                msg = ad.mul(ad.mul(ad.take(radial, (slice(None), slice(j, j + 1))), s_j), yj)
                if alpha is not None:
                    msg = ad.mul(msg, ad.reshape(alpha, (ne, 1, 1)))
                agg = ad.segment_sum(msg, recv, n)  # ascending edge order
                mix = ad.transpose(ad.as_node(params[f"layer{t}.mix{j}"]))
                new_h[j] = ad.add(h[j], ad.matmul(agg, mix))
            h = new_h
    return h


def _forward_atom_energies(
    positions: ad.Node,
    species_idx: np.ndarray,
    edges: np.ndarray,
    cfg: dict,
    params: dict,
    gate_override: float | None = None,
) -> ad.Node:
    """Per-atom energies (n,): linear readout of scalars plus references."""
    n, c = len(species_idx), cfg["channels"]
    h = _forward_blocks(positions, species_idx, edges, cfg, params, gate_override)
    scalars = ad.reshape(h[0], (n, c))
    # broadcast-multiply + per-row sum instead of a matvec: each atom's
    # readout then never depends on where its row sits in the batch
    e_atom = ad.sum_(ad.mul(scalars, ad.as_node(params["readout"])), axis=-1)
    ref = ad.take(ad.as_node(params["ref_energy"]), (species_idx,))
    return ad.add(e_atom, ref)


def _prep(config: AtomicConfiguration, state: ModelState, neighbors: NeighborList | None):
    idx = _species_index(config.species, state.config["species"])
    nl = neighbors if neighbors is not None else neighbor_list(config.positions, state.config["cutoff"])
    return idx, nl


def energy(config: AtomicConfiguration, state: ModelState, neighbors: NeighborList | None = None):
    """Total energy and per-atom contributions (floats, no gradients).

    The total is an exactly rounded sum of per-atom terms, so relabeling
    identical atoms cannot change it through accumulation order.
    """
    idx, nl = _prep(config, state, neighbors)
    e_atom = _forward_atom_energies(ad.constant(config.positions), idx, nl.edges, state.config, state.params)
    total = ad.sum_exact(e_atom)
    out = float(total.value), e_atom.value
    ad.release(total)
    return out


def energy_and_forces(config: AtomicConfiguration, state: ModelState, neighbors: NeighborList | None = None, gate_override: float | None = None):
    """Total energy, per-atom energies, and forces from one reverse pass."""
    idx, nl = _prep(config, state, neighbors)
    pos = ad.leaf(config.positions)
    e_atom = _forward_atom_energies(pos, idx, nl.edges, state.config, state.params, gate_override)
    total = ad.sum_exact(e_atom)
    (g,) = ad.grad(total, [pos], allow_unused=True)
    out = float(total.value), e_atom.value, -g.value
    ad.release(total, g)
    return out


def forces(config: AtomicConfiguration, state: ModelState, neighbors: NeighborList | None = None) -> np.ndarray:
    return energy_and_forces(config, state, neighbors)[2]


def model_edge_gates(config: AtomicConfiguration, state: ModelState, neighbors: NeighborList | None = None):
    """Gate values for every directed edge, one record per layer.

    Returns (edges, trace); trace[t] is a dict with "alpha" and
    "pooled_norm" arrays aligned to the edge rows. Ungated models report
    all-ones gates (messages pass unscaled) and zero pooled norms.
    """
    idx, nl = _prep(config, state, neighbors)
    trace: list[dict] = []
    h = _forward_blocks(
        ad.constant(config.positions), idx, nl.edges, state.config, state.params,
        gate_trace=trace,
    )
    ad.release(*h.values())
    if not len(nl.edges):
        trace = [
            {"alpha": np.zeros(0), "pooled_norm": np.zeros(0)}
            for _ in range(state.config["layers"])
        ]
    return nl.edges, trace


def with_grid(state: ModelState, grid) -> ModelState:
    """The same parameters evaluated on a different attention grid.

    Only models without a learned positional signal transfer cleanly: a
    per-point embedding has no defined values at new grid points, so this
    refuses to move one and otherwise installs zero rows of the right
    size. Everything else is resolution-independent.
    """
    n_theta, n_phi = int(grid[0]), int(grid[1])
    g = build_equiangular_grid(n_theta, n_phi)
    new = state.copy()
    for t in range(new.config["layers"]):
        key = f"layer{t}.attn.pos"
        if new.config["positional_encoding"] and np.any(new.params[key]):
            raise ValueError(
                "cannot transfer a learned positional embedding to a new grid; "
                "disable positional encoding first"
            )
        new.params[key] = np.zeros((g.n_points, new.config["d"]))
    new.config["grid"] = (n_theta, n_phi)
    return new


def node_features(config: AtomicConfiguration, state: ModelState, neighbors: NeighborList | None = None) -> EquivariantFeatures:
    """Final per-atom feature blocks after all layers (numpy values)."""
    idx, nl = _prep(config, state, neighbors)
    blocks = _forward_blocks(ad.constant(config.positions), idx, nl.edges, state.config, state.params)
    return EquivariantFeatures({l: np.asarray(b.value) for l, b in blocks.items()})


@dataclass
class BatchGraph:
    """Taped multi-structure graph for training.

    energies holds one total per structure in input order; positions is
    the leaf over the concatenated coordinates, so one gradient call
    yields forces for every structure at once.
    """

    energies: ad.Node  # (n_structures,)
    positions: ad.Node  # leaf, (total_atoms, 3)
    n_atoms: np.ndarray  # (n_structures,)
    atom_graph: np.ndarray  # (total_atoms,) structure id per atom


def batch_graph(
    configs: list[AtomicConfiguration],
    state: ModelState,
    params: dict | None = None,
    neighbor_lists: list[NeighborList] | None = None,
    gate_override: float | None = None,
) -> BatchGraph:
    """Concatenate structures into one taped forward over shared parameters.

    params may be a table of autodiff leaves so that parameter gradients
    flow; neighbor lists may be precomputed once per structure and reused
    across steps since geometries are fixed during training.
    """
    if not configs:
        raise ValueError("empty batch")
    if neighbor_lists is None:
        neighbor_lists = [neighbor_list(c.positions, state.config["cutoff"]) for c in configs]
    if params is None:
        params = state.params

    counts = np.array([c.n_atoms for c in configs])
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    species = np.concatenate([c.species for c in configs])
    idx = _species_index(species, state.config["species"])
    edges = np.concatenate(
        [nl.edges + off for nl, off in zip(neighbor_lists, offsets)], axis=0
    ) if any(nl.n_edges for nl in neighbor_lists) else np.zeros((0, 2), dtype=int)
    atom_graph = np.repeat(np.arange(len(configs)), counts)

    pos = ad.leaf(np.concatenate([c.positions for c in configs], axis=0))
    e_atom = _forward_atom_energies(pos, idx, edges, state.config, params, gate_override)
    totals = ad.segment_sum(e_atom, atom_graph, len(configs), exact=True)
    return BatchGraph(totals, pos, counts, atom_graph)
