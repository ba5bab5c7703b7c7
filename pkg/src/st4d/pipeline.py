"""End-to-end differentiable stack: scene -> prompt -> features -> probes.

The model owns no arrays; every learnable lives in a ParamStore under a
dotted group name (pos_enc., time_enc., prompt., patch., fuse., gate.,
proj., text., probe.) so stage schedules can freeze whole groups and the
finite-difference oracle can sweep every entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .encoding import (
    FourierEncoder,
    PromptMlp,
    assemble_prompt,
    assemble_prompt_bwd,
    encode_position,
    encode_position_bwd,
    encode_time,
    encode_time_bwd,
)
from .geometry import Coord4DGrid, build_coord_grid, block_matching_flow
from .language import (
    TokenSequence,
    Vocab,
    embed_sequence,
    embed_sequence_bwd,
    parse_instruction,
)
from .numerics import (
    Array,
    ParamStore,
    Rng,
    attention_bwd,
    attention_fwd,
    linear_bwd,
    linear_fwd,
    mlp_bwd,
    mlp_fwd,
    softmax_rows,
)
from .scenesim import (
    PALETTE,
    ObjectSpec,
    SceneSpec,
    SceneTruth,
    emit_instructions,
    generate,
)
from .vision import (
    FeatureBundle,
    FusionWeights,
    GateMlp,
    ProjectorMlp,
    encode_patches,
    encode_patches_bwd,
    disentangle_spatial,
    disentangle_spatial_bwd,
    disentangle_temporal,
    disentangle_temporal_bwd,
    fuse,
    fuse_bwd,
    project_tokens,
    project_tokens_bwd,
)

TEXT_GRAD_NAMES = {
    "vocab": "text.vocab",
    "scale_pos": "text.scale_pos",
    "scale_time": "text.scale_time",
    "align": "text.align",
    "raw_pos": "text.raw_pos",
    "raw_time": "text.raw_time",
    "pos_freq": "pos_enc.freq",
    "time_freq": "time_enc.freq",
}

FUSE_GRAD_NAMES = {
    "wq": "fuse.wq",
    "wk": "fuse.wk",
    "wv": "fuse.wv",
    "concat_w": "fuse.concat_w",
    "weighting_w": "fuse.weighting_w",
    "gate.w1": "gate.w1",
    "gate.b1": "gate.b1",
    "gate.w2": "gate.w2",
    "gate.b2": "gate.b2",
}


@dataclass
class Pair:
    """One instruction/answer example with parsed text and numeric targets."""

    instruction: str
    answer: str
    task: str
    scene_id: str
    seq: TokenSequence
    target_xyz: Array | None
    target_bin: int | None


def make_pair(raw: dict, n_frames: int) -> Pair:
    """Parse an emitted instruction pair; targets come from answer markers."""
    seq = parse_instruction(raw["instruction"])
    ans = parse_instruction(raw["answer"])
    locs = ans.literals("loc")
    times = ans.literals("time")
    target_xyz = np.array(locs[0]) if locs else None
    target_bin = None
    if times:
        target_bin = int(round(times[0][0] * (n_frames - 1))) if n_frames > 1 else 0
    return Pair(
        instruction=raw["instruction"], answer=raw["answer"], task=raw["task"],
        scene_id=raw["scene_id"], seq=seq, target_xyz=target_xyz,
        target_bin=target_bin)


@dataclass
class SceneData:
    """A generated scene plus its coordinate grid and instruction pairs."""

    spec: SceneSpec
    frames: list
    truth: SceneTruth
    grid: Coord4DGrid
    pairs: list[Pair] = field(default_factory=list)


def random_scene_spec(config: ExperimentConfig, scene_seed: int) -> SceneSpec:
    """Sample object trajectories that sweep the scene volume."""
    rng = Rng(scene_seed).split("spec")
    t_n = config.n_frames
    color_order = list(PALETTE)
    perm = rng.permutation(len(color_order))
    objects = []
    for i in range(config.n_objects):
        orng = rng.split(f"obj-{i}")
        kind = ("linear", "circular", "sinusoidal")[int(orng.integers(0, 3))]
        color = color_order[int(perm[i % len(color_order)])]
        if kind == "linear":
            for _ in range(64):
                start = np.array([orng.uniform(-1.5, 1.5), orng.uniform(-1.5, 1.5),
                                  orng.uniform(-0.6, 0.45)])
                end = np.array([orng.uniform(-1.5, 1.5), orng.uniform(-1.5, 1.5),
                                orng.uniform(-0.6, 0.45)])
                if np.linalg.norm(end - start) >= 1.6:
                    break
            vel = (end - start) / max(t_n - 1, 1)
            params = {"start": start.tolist(), "velocity": vel.tolist()}
        elif kind == "circular":
            params = {
                "center": [orng.uniform(-0.4, 0.4), orng.uniform(-0.4, 0.4),
                           orng.uniform(-0.5, 0.4)],
                "radius": orng.uniform(0.8, 1.3),
                "omega": orng.uniform(0.55, 0.95),
                "phase": orng.uniform(0.0, 2 * math.pi),
            }
        else:
            ang = orng.uniform(0.0, 2 * math.pi)
            params = {
                "start": [orng.uniform(-0.9, 0.9), orng.uniform(-0.9, 0.9),
                          orng.uniform(-0.5, 0.4)],
                "axis": [math.cos(ang), math.sin(ang), 0.0],
                "amplitude": orng.uniform(0.9, 1.3),
                "omega": orng.uniform(0.7, 1.1),
                "phase": orng.uniform(0.0, 2 * math.pi),
            }
        objects.append(ObjectSpec(n_points=60, extent=0.4, color=color,
                                  kind=kind, params=params))
    return SceneSpec(
        seed=scene_seed,
        n_views=config.n_views,
        n_frames=config.n_frames,
        height=config.image_size,
        width=config.image_size,
        patch_size=config.patch_size,
        objects=objects,
    )


def build_scene_data(config: ExperimentConfig, scene_seed: int) -> SceneData:
    """Generate a scene and precompute its coordinate grid, flow, and pairs."""
    spec = random_scene_spec(config, scene_seed)
    frames, truth = generate(spec)
    if config.flow_source == "block":
        def flow_fn(a, b):
            return block_matching_flow(a, b, config.patch_size, config.block_search)
        grid = build_coord_grid(frames, config.patch_size, spec.aabb, flow_fn)
    else:
        grid = build_coord_grid(frames, config.patch_size, spec.aabb)
        grid.flow_mag = truth.flow.reshape(-1).copy()
    pairs = [make_pair(raw, config.n_frames) for raw in emit_instructions(truth)]
    return SceneData(spec=spec, frames=frames, truth=truth, grid=grid, pairs=pairs)


@dataclass
class SceneState:
    """Forward activations and caches for one scene pass."""

    scene: SceneData
    f: Array
    f_s: Array
    f_t: Array
    prompt: Array
    f_st: Array
    tau_v: Array
    caches: dict
    zero_prompt: bool

    def bundle(self) -> FeatureBundle:
        return FeatureBundle(f=self.f, f_s=self.f_s, f_t=self.f_t,
                             f_st=self.f_st, tau_v=self.tau_v,
                             layout=self.scene.grid.layout)


class Model:
    """The full stack bound to a ParamStore."""

    def __init__(self, config: ExperimentConfig, params: ParamStore):
        config.validate()
        self.config = config
        self.params = params

    # -- parameter construction ------------------------------------------

    @staticmethod
    def init_params(config: ExperimentConfig, rng: Rng) -> ParamStore:
        config.validate()
        ps = ParamStore()
        d, d_p, d_l = config.d, config.d_p, config.d_l
        half = d // 2
        init = rng.split("init")
        ps.add("pos_enc.freq", init.split("pos").normal((half, 3), config.init_sigma))
        ps.add("time_enc.freq", init.split("time").normal((half, 1), config.init_sigma))
        ps.add("prompt.mix", init.split("mix").xavier_uniform(2 * d, 2 * d))
        ph = config.prompt_hidden
        ps.add("prompt.mlp.w1", init.split("pmlp1").xavier_uniform(ph, 2 * d))
        ps.add("prompt.mlp.b1", np.zeros((1, ph)))
        ps.add("prompt.mlp.w2", init.split("pmlp2").xavier_uniform(d_p, ph))
        ps.add("prompt.mlp.b2", np.zeros((1, d_p)))
        ppc = config.patch_size ** 2 * 3
        ps.add("patch.embed",
               init.split("patch").xavier_uniform(d_p, ppc) * config.patch_embed_scale)
        ps.add("patch.bias", np.zeros((1, d_p)))
        ps.add("fuse.wq", init.split("wq").xavier_uniform(d_p, d_p))
        ps.add("fuse.wk", init.split("wk").xavier_uniform(d_p, d_p))
        ps.add("fuse.wv", init.split("wv").xavier_uniform(d_p, d_p))
        ps.add("fuse.concat_w", init.split("wc").xavier_uniform(d_p, 3 * d_p))
        ps.add("fuse.weighting_w", init.split("ww").xavier_uniform(d_p, 2 * d_p))
        gh = max(d_p // 2, 1)
        ps.add("gate.w1", init.split("gate1").xavier_uniform(gh, d_p))
        ps.add("gate.b1", np.zeros((1, gh)))
        # Final gate layer starts at zero so the object gate opens at 0.5.
        ps.add("gate.w2", np.zeros((1, gh)))
        ps.add("gate.b2", np.zeros((1, 1)))
        ps.add("proj.w1", init.split("proj1").xavier_uniform(d_p, d_p))
        ps.add("proj.b1", np.zeros((1, d_p)))
        ps.add("proj.w2", init.split("proj2").xavier_uniform(d_l, d_p))
        ps.add("proj.b2", np.zeros((1, d_l)))
        ps.add("text.vocab",
               init.split("vocab").normal((config.vocab_size, d_l), 1.0 / math.sqrt(d_l)))
        ps.add("text.scale_pos", np.ones((1, d_l)))
        ps.add("text.scale_time", np.ones((1, d_l)))
        ps.add("text.align", init.split("align").xavier_uniform(d_l, d))
        ps.add("text.raw_pos", init.split("rawp").xavier_uniform(d, 3))
        ps.add("text.raw_time", init.split("rawt").xavier_uniform(d, 1))
        pr = config.probe_hidden
        ps.add("probe.pool", init.split("pool").xavier_uniform(d_l, d_l))
        ps.add("probe.xyz.w1", init.split("px1").xavier_uniform(pr, d_l))
        ps.add("probe.xyz.b1", np.zeros((1, pr)))
        ps.add("probe.xyz.w2", init.split("px2").xavier_uniform(3, pr))
        ps.add("probe.xyz.b2", np.zeros((1, 3)))
        ps.add("probe.time.w1", init.split("pt1").xavier_uniform(pr, d_l))
        ps.add("probe.time.b1", np.zeros((1, pr)))
        ps.add("probe.time.w2", init.split("pt2").xavier_uniform(config.n_frames, pr))
        ps.add("probe.time.b2", np.zeros((1, config.n_frames)))
        return ps

    # -- weight views ------------------------------------------------------

    @property
    def encoder(self) -> FourierEncoder:
        p = self.params.params
        return FourierEncoder(p["pos_enc.freq"], p["time_enc.freq"])

    @property
    def prompt_mlp(self) -> PromptMlp:
        p = self.params.params
        return PromptMlp(p["prompt.mlp.w1"], p["prompt.mlp.b1"],
                         p["prompt.mlp.w2"], p["prompt.mlp.b2"])

    @property
    def fusion_weights(self) -> FusionWeights:
        p = self.params.params
        return FusionWeights(
            wq=p["fuse.wq"], wk=p["fuse.wk"], wv=p["fuse.wv"],
            heads=self.config.heads,
            gate=GateMlp(p["gate.w1"], p["gate.b1"], p["gate.w2"], p["gate.b2"]),
            concat_w=p["fuse.concat_w"], weighting_w=p["fuse.weighting_w"])

    @property
    def projector(self) -> ProjectorMlp:
        p = self.params.params
        return ProjectorMlp(p["proj.w1"], p["proj.b1"], p["proj.w2"], p["proj.b2"])

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.params.params["text.vocab"])

    # -- forward/backward --------------------------------------------------

    def scene_forward(self, scene: SceneData, zero_prompt: bool = False) -> SceneState:
        cfg = self.config
        p = self.params.params
        layout = scene.grid.layout
        caches: dict = {}
        f, caches["patch"] = encode_patches(
            scene.frames, cfg.patch_size, p["patch.embed"], p["patch.bias"])

        if cfg.disentangle and layout.n_views >= 2:
            f_s, caches["spatial"] = disentangle_spatial(f, layout)
        else:
            f_s, caches["spatial"] = f, None
        if cfg.disentangle and layout.n_times >= 2:
            f_t, caches["temporal"] = disentangle_temporal(f, layout)
        elif cfg.disentangle:
            f_t, caches["temporal"] = np.zeros_like(f), "zero"
        else:
            f_t, caches["temporal"] = f, None

        mode = cfg.coordinate_mode
        if zero_prompt or mode == "none":
            prompt = np.zeros((layout.n_tokens, cfg.d_p))
            caches["prompt"] = None
        else:
            xyz = scene.grid.coords[:, :3]
            t = scene.grid.coords[:, 3:4]
            groups = [sl for _, _, sl in layout.frame_slices()]
            p_xyz, c_pos = encode_position(self.encoder, xyz)
            p_t, c_time = encode_time(self.encoder, t, scene.grid.flow_mag, groups)
            if mode == "pos":
                p_t = np.zeros_like(p_t)
            elif mode == "time":
                p_xyz = np.zeros_like(p_xyz)
            prompt, c_asm = assemble_prompt(p_xyz, p_t, p["prompt.mix"], self.prompt_mlp)
            caches["prompt"] = (c_pos, c_time, c_asm, mode)

        f_st, caches["fuse"] = fuse(
            f_s, f_t, prompt, self.fusion_weights, layout,
            strategy=cfg.fusion_strategy, scope=cfg.fusion_scope)
        tau_v, caches["proj"] = project_tokens(f_st, self.projector)
        return SceneState(scene=scene, f=f, f_s=f_s, f_t=f_t, prompt=prompt,
                          f_st=f_st, tau_v=tau_v, caches=caches,
                          zero_prompt=zero_prompt)

    def scene_backward(self, state: SceneState, d_tau_v: Array) -> None:
        acc = self.params.accumulate_grad
        d_f_st, proj_grads = project_tokens_bwd(d_tau_v, state.caches["proj"])
        for name, g in zip(("proj.w1", "proj.b1", "proj.w2", "proj.b2"), proj_grads):
            acc(name, g)
        d_fs, d_ft, d_prompt, fuse_grads = fuse_bwd(d_f_st, state.caches["fuse"])
        for key, g in fuse_grads.items():
            acc(FUSE_GRAD_NAMES[key], g)

        if state.caches["prompt"] is not None:
            c_pos, c_time, c_asm, mode = state.caches["prompt"]
            d_pxyz, d_pt, d_mix, mlp_grads = assemble_prompt_bwd(d_prompt, c_asm)
            acc("prompt.mix", d_mix)
            for name, g in zip(
                    ("prompt.mlp.w1", "prompt.mlp.b1", "prompt.mlp.w2", "prompt.mlp.b2"),
                    mlp_grads):
                acc(name, g)
            if mode in ("full", "pos"):
                d_freq, _ = encode_position_bwd(d_pxyz, c_pos)
                acc("pos_enc.freq", d_freq)
            if mode in ("full", "time"):
                acc("time_enc.freq", encode_time_bwd(d_pt, c_time))

        df = np.zeros_like(state.f)
        if state.caches["spatial"] is not None:
            df += disentangle_spatial_bwd(d_fs, state.caches["spatial"])
        else:
            df += d_fs
        if state.caches["temporal"] == "zero":
            pass
        elif state.caches["temporal"] is not None:
            df += disentangle_temporal_bwd(d_ft, state.caches["temporal"])
        else:
            df += d_ft
        dw, db = encode_patches_bwd(df, state.caches["patch"])
        acc("patch.embed", dw)
        acc("patch.bias", db)

    # -- language and probes ------------------------------------------------

    def pair_sequence(self, pair: Pair) -> TokenSequence:
        if self.config.text_coord_mode == "none":
            return pair.seq.strip_literals()
        return pair.seq

    def embed_text(self, seq: TokenSequence):
        p = self.params.params
        return embed_sequence(
            seq, self.vocab, self.encoder,
            p["text.scale_pos"], p["text.scale_time"], p["text.align"],
            raw_pos=p["text.raw_pos"], raw_time=p["text.raw_time"],
            mode=self.config.text_coord_mode)

    def text_backward(self, d_tau_l: Array, cache) -> None:
        for key, g in embed_sequence_bwd(d_tau_l, cache).items():
            self.params.accumulate_grad(TEXT_GRAD_NAMES[key], g)

    def probe_forward(self, tau_v: Array, tau_l: Array):
        """Attention-pool visual tokens with a text-derived query, then regress
        (x, y, z) and classify the frame bin. Returns (pred_xyz, logits, cache)."""
        p = self.params.params
        d_l = self.config.d_l
        pooled_l = tau_l.mean(axis=0, keepdims=True)
        query, q_cache = linear_fwd(pooled_l, p["probe.pool"])
        pooled_v, a_cache = attention_fwd(query, tau_v, tau_v, 1.0 / math.sqrt(d_l))
        pred, x_cache = mlp_fwd(pooled_v, p["probe.xyz.w1"], p["probe.xyz.b1"],
                                p["probe.xyz.w2"], p["probe.xyz.b2"])
        logits, t_cache = mlp_fwd(pooled_v, p["probe.time.w1"], p["probe.time.b1"],
                                  p["probe.time.w2"], p["probe.time.b2"])
        cache = (q_cache, a_cache, x_cache, t_cache, tau_l.shape[0])
        return pred.ravel(), logits.ravel(), cache

    def probe_backward(self, d_pred: Array, d_logits: Array, cache):
        """Returns ``(d_tau_v, d_tau_l)`` and accumulates probe grads."""
        acc = self.params.accumulate_grad
        q_cache, a_cache, x_cache, t_cache, n_l = cache
        d_pool_x, xg = mlp_bwd(d_pred.reshape(1, -1), x_cache)
        for name, g in zip(("probe.xyz.w1", "probe.xyz.b1", "probe.xyz.w2",
                            "probe.xyz.b2"), xg):
            acc(name, g)
        d_pool_t, tg = mlp_bwd(d_logits.reshape(1, -1), t_cache)
        for name, g in zip(("probe.time.w1", "probe.time.b1", "probe.time.w2",
                            "probe.time.b2"), tg):
            acc(name, g)
        dq, dk, dv = attention_bwd(d_pool_x + d_pool_t, a_cache)
        d_tau_v = dk + dv
        d_pooled_l, d_pool_w, _ = linear_bwd(dq, q_cache)
        acc("probe.pool", d_pool_w)
        d_tau_l = np.repeat(d_pooled_l / n_l, n_l, axis=0)
        return d_tau_v, d_tau_l

    def pair_loss(self, state: SceneState, pair: Pair, weight: float = 1.0):
        """Loss and gradient seeding for one pair; returns (loss, d_tau_v)."""
        seq = self.pair_sequence(pair)
        tau_l, text_cache = self.embed_text(seq)
        pred, logits, probe_cache = self.probe_forward(state.tau_v, tau_l)
        loss = 0.0
        d_pred = np.zeros(3)
        d_logits = np.zeros_like(logits)
        if pair.target_xyz is not None:
            diff = pred - pair.target_xyz
            loss += float((diff ** 2).sum())
            d_pred = 2.0 * diff
        if pair.target_bin is not None:
            probs = softmax_rows(logits.reshape(1, -1)).ravel()
            loss += -math.log(max(probs[pair.target_bin], 1e-300))
            d_logits = probs.copy()
            d_logits[pair.target_bin] -= 1.0
        d_tau_v, d_tau_l = self.probe_backward(
            d_pred * weight, d_logits * weight, probe_cache)
        self.text_backward(d_tau_l, text_cache)
        return loss, d_tau_v

    def predict(self, state: SceneState, pair: Pair):
        """Inference: returns (pred_xyz, pred_bin)."""
        tau_l, _ = self.embed_text(self.pair_sequence(pair))
        pred, logits, _ = self.probe_forward(state.tau_v, tau_l)
        return pred, int(np.argmax(logits))

    def batch_step(self, scene: SceneData, pairs, zero_prompt: bool = False) -> float:
        """Forward + backward over a batch of pairs from one scene.

        Gradients accumulate into the ParamStore (caller zeroes them);
        returns the mean pair loss.
        """
        state = self.scene_forward(scene, zero_prompt=zero_prompt)
        d_tau_v = np.zeros_like(state.tau_v)
        total = 0.0
        w = 1.0 / len(pairs)
        for pair in pairs:
            loss, dtv = self.pair_loss(state, pair, weight=w)
            total += loss * w
            d_tau_v += dtv
        self.scene_backward(state, d_tau_v)
        return total
