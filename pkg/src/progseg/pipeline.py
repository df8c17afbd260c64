"""Per-frame orchestration: reconstruction, clustering, proposals, CRF and instances."""

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import crf, frame_io, instance, metrics, proposal
from . import supervoxel as sv
from . import voxel_map as vm

log = logging.getLogger(__name__)

STAGES = ("integration", "fusion", "clustering", "proposal", "crf", "instance", "total")
CORE_STAGES = ("clustering", "proposal", "crf")


@dataclass
class PipelineConfig:
    sequence: str = ""
    output: str = "out"
    scene: str = ""
    mode: str = "semantic"
    K: int = 10
    tau: float = 0.5
    crf_iterations_per_frame: int = 1
    offline_iterations: int = 10
    mesh_node_cap: int = 200000
    frames: int = 0
    seed: int = 0
    checkpoint: str = ""
    resume: str = ""
    ground_truth: bool = True

    voxel_size: float = 0.008
    voxel_truncation: float = 0.04
    voxel_weight_cap: int = 255
    voxel_init_objectness: float = 0.5
    voxel_objectness_step: float = 0.1

    cluster_spacing: float = 0.08
    cluster_alpha: float = 1.0
    cluster_beta: float = 1.0
    cluster_n_c: float = 400.0
    cluster_n_s: float = 0.0

    proposal_k: float = 0.5
    proposal_min_size: int = 3

    crf_w_unary: float = 1.0
    crf_w_pair: float = 1.0
    crf_w_obj: float = 0.5
    crf_w_cons: float = 0.5
    crf_w_rel: float = 0.25
    crf_theta_alpha: float = 0.2
    crf_theta_beta: float = 0.5
    crf_relation: str = "coupled"
    crf_cooccurrence: str = ""
    crf_pair_radius: float = 2.0

    enable_pair: bool = True
    enable_obj: bool = True
    enable_cons: bool = True
    enable_rel: bool = True

    instance_min_spawn: int = 5

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.crf_iterations_per_frame < 1 or self.offline_iterations < 1:
            raise ValueError("CRF iteration counts must be >= 1")
        if self.mode not in ("semantic", "instance"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_mapping(cls, kv, base=None):
        """Build from `key = value` pairs; dotted keys map to prefixed fields."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for key, raw in kv.items():
            name = key.strip().replace(".", "_").replace("-", "_")
            if name.startswith("pipeline_"):
                name = name[len("pipeline_"):]
            if name not in types:
                raise ValueError(f"unknown config key {key!r}")
            values[name] = _convert(raw, types[name], key)
        return cls(**values)

    @classmethod
    def load(cls, path, overrides=None):
        path = Path(path)
        kv = frame_io.parse_key_values(path.read_text(), str(path))
        cfg = cls.from_mapping(kv)
        for k in ("sequence", "output", "checkpoint", "resume", "crf_cooccurrence"):
            val = getattr(cfg, k)
            if val and not Path(val).is_absolute():
                setattr(cfg, k, str(path.parent / val))
        if overrides:
            cfg = cls.from_mapping(overrides, base=cfg)
        return cfg

    def dump(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @property
    def weights(self):
        return crf.CrfWeights(
            self.crf_w_unary,
            self.crf_w_pair if self.enable_pair else 0.0,
            self.crf_w_obj if self.enable_obj else 0.0,
            self.crf_w_cons if self.enable_cons else 0.0,
            self.crf_w_rel if self.enable_rel else 0.0,
            self.crf_theta_alpha, self.crf_theta_beta, self.crf_relation)

    @property
    def cluster_params(self):
        return sv.ClusterParams(self.cluster_alpha, self.cluster_beta, self.cluster_n_c,
                                self.cluster_n_s or None, self.cluster_spacing)


def _convert(raw, typ, key):
    raw = str(raw).strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from exc


class FrameError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"frame {index}: {cause}")
        self.index = index


class Pipeline:
    """Mutable state of one streaming run."""

    def __init__(self, config, meta):
        self.config = config
        self.meta = meta
        c = config
        self.vmap = vm.VoxelMap(c.voxel_size, c.voxel_truncation, c.voxel_weight_cap,
                                c.voxel_init_objectness, c.voxel_objectness_step)
        self.num_labels = len(meta.labels)
        self.svs = sv.SuperVoxelSet(c.cluster_params, self.num_labels)
        self.registry = instance.InstanceRegistry()
        self.space = crf.LabelSpace(tuple(meta.labels), meta.object_labels)
        self.weights = c.weights
        self.cooc = (crf.read_cooccurrence(c.crf_cooccurrence, meta.labels)
                     if c.crf_cooccurrence else np.ones((self.num_labels, self.num_labels)))
        self.cluster_label = np.full(0, -1, dtype=np.int64)
        self.cluster_q = np.zeros((0, self.num_labels))
        self.next_frame = 0
        self.timings = []
        self.flips = []
        self.active_sizes = []
        self.last_nodes = np.zeros(0, dtype=np.int64)

    # per-cluster CRF memory ------------------------------------------------
    def _grow(self):
        n = self.svs.next_id
        if n > self.cluster_label.size:
            cap = max(n, 2 * self.cluster_label.size, 256)
            lab = np.full(cap, -1, dtype=np.int64)
            lab[: self.cluster_label.size] = self.cluster_label
            q = np.zeros((cap, self.num_labels))
            q[: self.cluster_q.shape[0]] = self.cluster_q
            self.cluster_label, self.cluster_q = lab, q

    # one frame -------------------------------------------------------------
    def step(self, frame):
        c = self.config
        t = {s: 0.0 for s in STAGES}
        t0 = clock = time.perf_counter()

        def lap(stage):
            nonlocal clock
            now = time.perf_counter()
            t[stage] += (now - clock) * 1000.0
            clock = now

        vmap, svs = self.vmap, self.svs
        touched = vm.integrate_depth(vmap, frame)
        active = vm.frustum_active(vmap, frame.pose, frame.intrinsics, candidates=touched)
        self.active_sizes.append(int(active.size))
        lap("integration")
        if frame.has_prediction and frame.index % c.K == 0:
            vm.fuse_semantic(vmap, active, frame)
            vm.update_objectness(vmap, active, frame, self.meta.object_labels)
        lap("fusion")
        if c.ground_truth:
            vm.record_ground_truth(vmap, active, frame)
        clock = time.perf_counter()

        sv.seed(svs, vmap, active)
        sv.assign_step(svs, vmap, active)
        sv.update_centroids(svs, vmap, touched)
        nodes = sv.window_nodes(svs, active)
        edges = _local_edges(sv.adjacency(svs, vmap, active), nodes)
        lap("clustering")

        cliques, _ = proposal.propose(svs, nodes[edges] if edges.size else edges, nodes,
                                      c.proposal_k, c.proposal_min_size)
        lap("proposal")

        self._grow()
        state = self._semantic_state(nodes, edges, cliques, use_prev=True)
        labels, q = crf.infer(state, self.weights, c.crf_iterations_per_frame)
        self._record_flips(nodes, labels)
        self.cluster_label[nodes] = labels
        self.cluster_q[nodes] = q
        lap("crf")

        if c.mode == "instance":
            self._instance_step(active, nodes, edges, state, labels)
        lap("instance")
        t["total"] = (time.perf_counter() - t0) * 1000.0
        self.timings.append((frame.index, t))
        self.next_frame = frame.index + 1
        return labels

    def _record_flips(self, nodes, labels):
        prev = self.cluster_label[nodes]
        had = prev >= 0
        rate = float(np.mean(prev[had] != labels[had])) if had.any() else 0.0
        self.flips.append(rate)

    def _kernel(self, nodes, edges):
        svs, c = self.svs, self.config
        pos = svs._c["pos"][nodes]
        normal = svs._c["normal"][nodes]
        has_n = svs._c["has_normal"][nodes]
        pairs = [edges]
        if nodes.size > 1 and c.crf_pair_radius > 0:
            near = cKDTree(pos).query_pairs(c.crf_pair_radius * c.cluster_spacing,
                                            output_type="ndarray")
            pairs.append(near.astype(np.int64))
        pairs = np.concatenate(pairs).reshape(-1, 2)
        if pairs.size:
            pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        return _kernel_from_pairs(len(nodes), pairs, pos, normal, has_n, self.weights)

    def _cliques_local(self, nodes, cliques, edges):
        clique_of = cliques.node_clique(nodes)
        cedges = proposal.clique_adjacency(cliques, nodes[edges] if edges.size else edges)
        return clique_of, cliques.flags, cedges

    def _semantic_state(self, nodes, edges, cliques, use_prev):
        hist = self.svs._c["label_hist"][nodes]
        prev = self.cluster_q[nodes] if use_prev else None
        has_prev = self.cluster_label[nodes] >= 0 if use_prev else None
        unary, _ = crf.build_unary(hist, prev, has_prev, self.config.tau)
        clique_of, flags, cedges = self._cliques_local(nodes, cliques, edges)
        return crf.MeanFieldState(unary, self._kernel(nodes, edges), clique_of, flags, cedges,
                                  self.space.object_mask, self.cooc)

    def _instance_step(self, active, nodes, edges, sem_state, labels):
        c, svs, vmap = self.config, self.svs, self.vmap
        ids = instance.reduce_labels(self.registry, active, vmap)
        svs._ensure_instances(int(ids.max()))
        # only object-category clusters carry instances
        sel = np.flatnonzero(np.isin(labels, np.array(sorted(self.meta.object_labels))))
        if sel.size == 0:
            return
        remap = np.full(nodes.size, -1, dtype=np.int64)
        remap[sel] = np.arange(sel.size)
        sub_nodes = nodes[sel]
        sub_edges = remap[edges] if edges.size else edges.reshape(-1, 2)
        sub_edges = sub_edges[(sub_edges >= 0).all(axis=1)] if sub_edges.size else sub_edges
        st = instance.instance_state(svs._c["inst_hist"][sub_nodes], ids, labels[sel],
                                     self.registry, sem_state.kernel[sel][:, sel],
                                     sem_state.clique_of[sel], sem_state.flags,
                                     sem_state.clique_edges)
        w = dataclasses.replace(self.weights, w_rel=0.0)
        inst, conf = instance.instance_infer(st, ids, w, 1)
        inst, new_id = instance.spawn_unknown(inst, labels[sel], sub_edges, self.registry,
                                              self.meta.object_labels, c.instance_min_spawn)
        if new_id is not None:
            log.debug("spawned instance %d", new_id)
        assign = svs.assignment[active]
        local = np.searchsorted(sub_nodes, assign)
        ok = (assign >= 0) & (local < sub_nodes.size)
        ok[ok] &= sub_nodes[local[ok]] == assign[ok]
        held = vmap.instance[active[ok]].astype(np.int64)
        held_cat = np.array([self.registry.category(i) if i in self.registry else -1
                             for i in held.tolist()], dtype=np.int64)
        stale = (held != instance.UNKNOWN) & (held_cat != labels[sel][local[ok]])
        fused = instance.fuse_instances(vmap, active[ok], local[ok], inst, conf, stale)
        if new_id is not None:
            spawned = inst == new_id
            stamped = instance.stamp_instance(vmap, svs.assignment, sub_nodes[spawned], new_id,
                                              float(np.mean(conf[spawned])))
            fused = np.concatenate([fused, stamped])
        if fused.size:
            sv.update_centroids(svs, vmap, fused)

    # outputs -----------------------------------------------------------------
    def resolved_labels(self, idx):
        """CRF label of each voxel's cluster where one exists, else its fused label."""
        assign = self.svs.assignment[idx]
        lab = self.vmap.label[idx].astype(np.int64)
        ok = assign >= 0
        cl = np.full(idx.size, -1, dtype=np.int64)
        cl[ok] = self.cluster_label[assign[ok]] if self.cluster_label.size else -1
        return np.where(cl >= 0, cl, lab)

    def surface(self, labels_for=None):
        pts, idx = vm.extract_surface_points(self.vmap)
        lab = self.resolved_labels(idx) if labels_for is None else labels_for(idx)
        pts["label"] = np.where(lab < 0, frame_io.NO_GT, lab)
        return pts, idx

    def update_registry_sizes(self):
        live = self.svs.live_ids()
        ih = self.svs._c["inst_hist"][live]
        if ih.shape[1] < 2:
            return
        dom = np.argmax(ih, axis=1)
        dom = dom[ih[np.arange(live.size), dom] > 0]
        ids, cnt = np.unique(dom, return_counts=True)
        self.registry.set_sizes(ids, cnt)

    # persistence ---------------------------------------------------------------
    def save_checkpoint(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.vmap.snapshot(path / "map.bin")
        sv.dump_assignments(self.svs, self.vmap, path / "clusters.bin")
        self.registry.dump(path / "registry.txt")
        n = self.svs.next_id
        self._grow()
        np.savez(path / "crf_state.npz", cluster_label=self.cluster_label[:n],
                 cluster_q=self.cluster_q[:n], next_frame=self.next_frame)

    def load_checkpoint(self, path):
        path = Path(path)
        c = self.config
        self.vmap = vm.VoxelMap.load_snapshot(path / "map.bin")
        self.svs = sv.restore(self.vmap, sv.load_assignments(path / "clusters.bin"),
                              c.cluster_params, self.num_labels)
        self.registry = instance.InstanceRegistry.load(path / "registry.txt")
        st = np.load(path / "crf_state.npz")
        self.cluster_label = st["cluster_label"].astype(np.int64)
        self.cluster_q = st["cluster_q"]
        self._grow()
        self.next_frame = int(st["next_frame"])


def _local_edges(edges, nodes):
    """Edges whose endpoints are both in `nodes`, re-indexed into positions of `nodes`."""
    if edges.size == 0 or nodes.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    loc = np.searchsorted(nodes, edges)
    loc_c = np.minimum(loc, nodes.size - 1)
    ok = np.all(nodes[loc_c] == edges, axis=1)
    return loc_c[ok]


def _kernel_from_pairs(n, pairs, pos, normal, has_n, weights):
    if pairs.size == 0:
        return crf.kernel_matrix(n, pairs, np.zeros(0))
    a, b = pairs[:, 0], pairs[:, 1]
    both = has_n[a] & has_n[b]
    # without a normal on either side the kernel falls back to position only
    na = np.where(both[:, None], normal[a], 0.0)
    nb = np.where(both[:, None], normal[b], 0.0)
    k = crf.pairwise_kernel(pos[a], pos[b], na, nb, weights)
    return crf.kernel_matrix(n, pairs, k)


@dataclass
class RunResult:
    points: np.ndarray
    voxels: np.ndarray
    rows: list
    timings: list
    flips: list
    pipeline: Pipeline

    def metric(self, name, method=None, cls="all"):
        for _, m, k, c, v in self.rows:
            if k == name and c == cls and (method is None or m == method):
                return v
        raise KeyError((name, method, cls))


def _scene_name(config, meta):
    return config.scene or Path(meta.root).name


def stream(config, meta=None, pipe=None):
    """Run the frame loop and return the pipeline state."""
    meta = meta or frame_io.read_manifest(config.sequence)
    pipe = pipe or Pipeline(config, meta)
    if config.resume:
        pipe.load_checkpoint(config.resume)
    last = meta.frames if config.frames <= 0 else min(config.frames, meta.frames)
    for i in range(pipe.next_frame, last):
        try:
            frame = frame_io.load_frame(meta, i)
            pipe.step(frame)
        except Exception as exc:
            if config.checkpoint:
                pipe.save_checkpoint(config.checkpoint)
            raise FrameError(i, exc) from exc
    return pipe


def _evaluate(pipe, pts, idx, method, scene):
    """Semantic and (optionally) instance rows for points that carry ground truth."""
    gt = pipe.vmap.gt_label[idx].astype(np.int64)
    has = gt >= 0
    if not has.any():
        return []
    pred = pts["label"].astype(np.int64)
    rows = [(scene, method, *r) for r in metrics.semantic_rows(pred[has], gt[has])]
    return rows


def _instance_eval(pipe, pts, idx, scene):
    gi = pipe.vmap.gt_instance[idx].astype(np.int64)
    gl = pipe.vmap.gt_label[idx].astype(np.int64)
    has = (gl >= 0) & (gi >= 0)
    if not has.any():
        return []
    rows = metrics.instance_rows(pts["instance"][has], pts["label"][has], pts["confidence"][has],
                                 gi[has], gl[has], pipe.meta.object_labels)
    return [(scene, "instance", *r) for r in rows]


def _direct_labels(pipe):
    return lambda idx: pipe.vmap.label[idx].astype(np.int64)


def finish(pipe, method, labels_for=None, write=True):
    """Extract the labeled surface, evaluate and write outputs."""
    c = pipe.config
    scene = _scene_name(c, pipe.meta)
    pts, idx = pipe.surface(labels_for)
    rows = _evaluate(pipe, pts, idx, method, scene)
    dpts, _ = pipe.surface(_direct_labels(pipe))
    rows += _evaluate(pipe, dpts, idx, "direct", scene)
    if c.mode == "instance":
        pipe.update_registry_sizes()
        rows += _instance_eval(pipe, pts, idx, scene)
    if write:
        out = Path(c.output)
        out.mkdir(parents=True, exist_ok=True)
        if pts.size:
            frame_io.write_labeled_cloud(pts, out / "labels.ply")
            gt = _ground_truth_cloud(pipe, pts, idx)
            if gt is not None:
                frame_io.write_labeled_cloud(gt, out / "gt.ply")
        metrics.write_report(rows, out / "metrics.csv")
        write_timings(pipe.timings, out / "timings.log")
        if c.mode == "instance":
            pipe.registry.dump(out / "instances.txt")
        if c.checkpoint:
            pipe.save_checkpoint(c.checkpoint)
    return RunResult(pts, idx, rows, pipe.timings, pipe.flips, pipe)


def _ground_truth_cloud(pipe, pts, idx):
    gl = pipe.vmap.gt_label[idx]
    has = gl >= 0
    if not has.any():
        return None
    gt = pts[has].copy()
    gt["label"] = gl[has]
    gt["instance"] = np.maximum(pipe.vmap.gt_instance[idx][has], 0)
    gt["confidence"] = 1.0
    return gt


def run(config, meta=None, write=True):
    pipe = stream(config, meta)
    return finish(pipe, "crf", write=write)


def run_offline(config, mesh_level=False, meta=None, write=True, pipe=None):
    """Online pass followed by a global CRF with `offline_iterations` sweeps.

    The global CRF spans every live super-voxel, or every surface voxel when
    `mesh_level` is set (bounded by `mesh_node_cap`).
    """
    pipe = pipe or stream(config, meta)
    svs, vmap, c = pipe.svs, pipe.vmap, config
    nodes = svs.live_ids()
    edges = _local_edges(sv.adjacency(svs, vmap), nodes)
    cliques, _ = proposal.propose(svs, nodes[edges] if edges.size else edges, nodes,
                                  c.proposal_k, c.proposal_min_size)
    if not mesh_level:
        state = pipe._semantic_state(nodes, edges, cliques, use_prev=False)
        labels, _ = crf.infer(state, pipe.weights, c.offline_iterations)
        pipe._grow()
        pipe.cluster_label[nodes] = labels
        return finish(pipe, "offline", write=write)
    _, idx = vm.extract_surface_points(vmap)
    if idx.size > c.mesh_node_cap:
        raise ValueError(f"mesh-level CRF needs {idx.size} nodes, above the cap of {c.mesh_node_cap}")
    labels = _mesh_level_labels(pipe, idx, nodes, cliques)
    # idx is sorted, so later lookups are a binary search
    return finish(pipe, "offline_mesh", labels_for=lambda q: labels[np.searchsorted(idx, q)],
                  write=write)


def _mesh_level_labels(pipe, idx, nodes, cliques):
    vmap, svs, c = pipe.vmap, pipe.svs, pipe.config
    n = idx.size
    hist = np.zeros((n, pipe.num_labels))
    lab = vmap.label[idx]
    ok = lab >= 0
    hist[np.flatnonzero(ok), lab[ok]] = vmap.label_conf[idx][ok]
    unary, _ = crf.build_unary(hist)
    pos = vmap.ijk[idx] * vmap.voxel_size
    normal, has_n = vm.voxel_normals(vmap, idx)
    pairs = cKDTree(pos).query_pairs(c.crf_pair_radius * c.cluster_spacing, output_type="ndarray")
    kernel = _kernel_from_pairs(n, pairs.astype(np.int64), pos, normal, has_n, pipe.weights)
    # voxels inherit the clique of their super-voxel
    assign = svs.assignment[idx]
    node_clique = cliques.node_clique(nodes)
    loc = np.searchsorted(nodes, assign)
    loc_c = np.minimum(loc, max(nodes.size - 1, 0))
    inside = (assign >= 0) & (nodes.size > 0) & (nodes[loc_c] == assign)
    clique_of = np.where(inside, node_clique[loc_c], -1)
    node_edges = _local_edges(sv.adjacency(svs, vmap), nodes)
    cedges = proposal.clique_adjacency(cliques, nodes[node_edges] if node_edges.size else node_edges)
    state = crf.MeanFieldState(unary, kernel, clique_of, cliques.flags, cedges,
                               pipe.space.object_mask, pipe.cooc)
    labels, _ = crf.infer(state, pipe.weights, c.offline_iterations)
    return labels


# timing reports ----------------------------------------------------------------
def write_timings(timings, path):
    with open(path, "w") as f:
        f.write("frame " + " ".join(STAGES) + "\n")
        for idx, t in timings:
            f.write(f"{idx} " + " ".join(f"{t[s]:.3f}" for s in STAGES) + "\n")


def read_timings(path):
    rows = []
    with open(path) as f:
        header = f.readline().split()
        if header[:1] != ["frame"]:
            raise ValueError(f"{path}: not a timing log")
        for line in f:
            parts = line.split()
            if parts:
                rows.append((int(parts[0]), dict(zip(header[1:], map(float, parts[1:])))))
    return rows


def report_timings(timings):
    """Per-stage mean and p95 (ms) and the least-squares slope of total time per frame."""
    if len(timings) < 2:
        raise ValueError("need at least two frames")
    frames = np.array([i for i, _ in timings], dtype=np.float64)
    stages = list(timings[0][1])
    table = {s: np.array([t[s] for _, t in timings]) for s in stages}
    core = [s for s in CORE_STAGES if s in table]
    if core:
        table["core"] = sum(table[s] for s in core)
    out = {}
    for s, v in table.items():
        slope = np.polyfit(frames, v, 1)[0] if np.ptp(frames) > 0 else 0.0
        out[s] = {"mean": float(v.mean()), "p95": float(np.percentile(v, 95)), "slope": float(slope)}
    return out


def format_timing_report(report):
    lines = [f"{'stage':<12} {'mean_ms':>10} {'p95_ms':>10} {'slope_ms/frame':>15}"]
    for s, r in report.items():
        lines.append(f"{s:<12} {r['mean']:>10.3f} {r['p95']:>10.3f} {r['slope']:>15.6f}")
    return "\n".join(lines)
