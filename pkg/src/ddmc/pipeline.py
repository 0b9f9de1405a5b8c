"""Staged training, evaluation, and ablation orchestration.

Training follows a fixed stage order (synthesis, registration,
reconstruction) with freeze-and-advance semantics: a stage trains only
its own networks while all earlier stages' parameters are loaded from
finalised checkpoints, switched to inference mode, and never updated.
Inputs that flow out of frozen networks are precomputed once per stage
per record, which keeps epochs cheap.

Contrast modes change the reconstruction input and which stages exist:

    single  reconstruct from the undersampled target alone (stages 1-2
            are bypassed; reference data is never read)
    concat  reconstruct from [moved reference, undersampled target]
            (stages 1-2 bypassed; no synthesis or registration)
    fused   full chain: synthesise the target contrast from the moved
            reference, rigidly register it to the zero-filled target,
            and reconstruct from [registered synthetic, undersampled]

Domain modes select the image branch, the k-space branch, or both
(each stage then carries the paired networks and the cross-domain
losses).  Stage training fixes to the acquisition the networks will
see at inference (moved reference, zero-filled fixed image) while the
losses compare against motion-free ground truth; the synthesis stage
itself trains on aligned pairs since it learns a pixelwise contrast
map and the moved input is handled by equivariance.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .acquisition import data_consistency_channels, make_mask
from .datagen import Dataset
from .diffcore import AdamState, ParamSet, Tensor, adam_step
from .errors import (CheckpointIntegrityError, StageOrderError,
                     TruncatedFileError, ValidationError)
from .evalkit import metrics as _metrics
from .fourier import (_fft2c_arrays, _ifft2c_arrays, fft2c_channels,
                      ifft2c_channels)
from .kernels import warp_forward
from .models import (ReconNet, ReconNetConfig, RegNet, RegNetConfig,
                     SynthNet, SynthNetConfig)
from .objectives import (DOMAIN_MODES, IMAGE_LOSS_KINDS, LossWeights,
                         stage_loss)

STAGES = ("synthesis", "registration", "reconstruction")
CONTRAST_MODES = ("single", "concat", "fused")
CHECKPOINT_VERSION = 1


@dataclass
class StageSettings:
    """Per-stage optimisation knobs."""

    max_epochs: int = 30
    patience: int = 10
    batch_size: int = 8
    lr: float = 2e-4

    def validate(self, stage):
        if self.max_epochs < 1 or self.patience < 0:
            raise ValidationError("stage %r: need max_epochs >= 1 and "
                                  "patience >= 0" % stage)
        if self.batch_size < 1:
            raise ValidationError("stage %r: batch_size must be >= 1" % stage)
        if not self.lr > 0:
            raise ValidationError("stage %r: lr must be positive" % stage)


@dataclass
class StagePlan:
    """Everything that defines one training run besides the dataset."""

    contrast_mode: str = "fused"
    domain_mode: str = "dual"
    image_loss: str = "complex"
    weights: LossWeights = field(default_factory=LossWeights)
    accel: int = 4
    mask_seed: int = 1009
    n_center: int = 6
    sigma_frac: float = 0.25
    image_size: int = 64
    base_channels: int = 16
    depth: int = 3
    reg_channels: tuple = (16, 32, 32)
    reg_fc_hidden: int = 64
    reg_refine_iters: int = 3
    stages: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in STAGES:
            self.stages.setdefault(s, StageSettings())

    def validate(self):
        if self.contrast_mode not in CONTRAST_MODES:
            raise ValidationError("unknown contrast mode %r, expected one "
                                  "of %s" % (self.contrast_mode,
                                             ", ".join(CONTRAST_MODES)))
        if self.domain_mode not in DOMAIN_MODES:
            raise ValidationError("unknown domain mode %r, expected one of "
                                  "%s" % (self.domain_mode,
                                          ", ".join(DOMAIN_MODES)))
        if self.image_loss not in IMAGE_LOSS_KINDS:
            raise ValidationError("unknown image loss %r" % self.image_loss)
        if self.accel < 1:
            raise ValidationError("acceleration must be >= 1, got %r"
                                  % self.accel)
        if self.reg_refine_iters < 1:
            raise ValidationError("reg_refine_iters must be >= 1, got %r"
                                  % self.reg_refine_iters)
        if self.image_size < 16 or self.image_size % 16:
            raise ValidationError("image_size must be a multiple of 16 so "
                                  "the registration pools land evenly, got "
                                  "%r" % self.image_size)
        for s in STAGES:
            self.stages[s].validate(s)

    def required_stages(self):
        """Stages this contrast mode actually trains, in order."""
        if self.contrast_mode in ("single", "concat"):
            return ("reconstruction",)
        return STAGES

    def branches(self):
        if self.domain_mode == "dual":
            return ("image", "kspace")
        return (self.domain_mode,)

    def recon_in_channels(self):
        return 2 if self.contrast_mode == "single" else 4

    def to_dict(self):
        d = {
            "contrast_mode": self.contrast_mode,
            "domain_mode": self.domain_mode,
            "image_loss": self.image_loss,
            "alpha": self.weights.alpha,
            "beta": self.weights.beta,
            "accel": self.accel,
            "mask_seed": self.mask_seed,
            "n_center": self.n_center,
            "sigma_frac": self.sigma_frac,
            "image_size": self.image_size,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "reg_channels": list(self.reg_channels),
            "reg_fc_hidden": self.reg_fc_hidden,
            "reg_refine_iters": self.reg_refine_iters,
            "stages": {s: asdict(self.stages[s]) for s in STAGES},
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        weights = LossWeights(alpha=d.pop("alpha"), beta=d.pop("beta"))
        stages = {s: StageSettings(**v) for s, v in d.pop("stages").items()}
        d["reg_channels"] = tuple(d["reg_channels"])
        return cls(weights=weights, stages=stages, **d)


@dataclass
class Checkpoint:
    """One finalised (or in-flight) stage result."""

    stage: str
    param_sets: dict
    config: dict
    seed: int
    val_history: list
    finalised: bool
    param_hashes: dict = field(default_factory=dict)

    def compute_hashes(self):
        self.param_hashes = {name: ps.content_hash()
                             for name, ps in sorted(self.param_sets.items())}
        return self.param_hashes

    def save(self, path):
        header = {
            "format_version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "config": self.config,
            "seed": self.seed,
            "val_history": self.val_history,
            "finalised": self.finalised,
            "param_hashes": self.param_hashes,
            "nets": sorted(self.param_sets),
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
        for name in sorted(self.param_sets):
            blob += self.param_sets[name].to_bytes()
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            buf = f.read()
        nl = buf.find(b"\n")
        if nl < 0:
            raise CheckpointIntegrityError("no header line in %s" % path)
        try:
            header = json.loads(buf[:nl].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointIntegrityError("unreadable header in %s: %s"
                                           % (path, e)) from e
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointIntegrityError(
                "checkpoint version %r, expected %d"
                % (header.get("format_version"), CHECKPOINT_VERSION))
        offset = nl + 1
        param_sets = {}
        for name in header["nets"]:
            ps, offset = ParamSet.from_bytes(buf, offset)
            param_sets[name] = ps
        if offset != len(buf):
            raise TruncatedFileError("%d trailing bytes in %s"
                                     % (len(buf) - offset, path))
        ck = cls(stage=header["stage"], param_sets=param_sets,
                 config=header["config"], seed=header["seed"],
                 val_history=header["val_history"],
                 finalised=header["finalised"],
                 param_hashes=header["param_hashes"])
        for name, ps in param_sets.items():
            want = ck.param_hashes.get(name)
            got = ps.content_hash()
            if want != got:
                raise CheckpointIntegrityError(
                    "parameter hash mismatch for %r in %s" % (name, path))
        return ck


class RunLog:
    """Append-only CSV logs plus a run summary JSON.

    Loss values land in deterministic CSVs; wall-clock time goes only
    into run.json so reruns stay byte-comparable on the CSVs.
    """

    STEP_COLUMNS = ("step", "stage", "mode", "L_i", "L_k", "L_ik", "L_ki",
                    "total")

    def __init__(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        self.out_dir = out_dir
        self.step_path = os.path.join(out_dir, "train_steps.csv")
        self.epoch_path = os.path.join(out_dir, "val_epochs.csv")
        self._t0 = time.time()
        if not os.path.exists(self.step_path):
            with open(self.step_path, "w", newline="") as f:
                csv.writer(f).writerow(self.STEP_COLUMNS)
        if not os.path.exists(self.epoch_path):
            with open(self.epoch_path, "w", newline="") as f:
                csv.writer(f).writerow(("stage", "epoch", "val_loss"))

    @staticmethod
    def _fmt(v):
        return "" if v is None else "%.8e" % v

    def log_step(self, step, report):
        c = report.components
        with open(self.step_path, "a", newline="") as f:
            csv.writer(f).writerow(
                (step, report.stage, report.domain_mode,
                 self._fmt(c["image"]), self._fmt(c["kspace"]),
                 self._fmt(c["cross_ik"]), self._fmt(c["cross_ki"]),
                 self._fmt(report.total)))

    def log_epoch(self, stage, epoch, val_loss):
        with open(self.epoch_path, "a", newline="") as f:
            csv.writer(f).writerow((stage, epoch, self._fmt(val_loss)))

    def finish(self, seed, config):
        payload = {"seed": seed, "config": config,
                   "wall_clock_s": time.time() - self._t0}
        with open(os.path.join(self.out_dir, "run.json"), "w") as f:
            json.dump(payload, f, sort_keys=True, indent=1)


def _sub_seed(root, record_id):
    return int(np.random.SeedSequence([root, record_id]).generate_state(1)[0])


@dataclass
class _RecordTensors:
    """Constant per-record arrays ([2, H, W] float32 channel stacks)."""

    record_id: int
    brain_mask: np.ndarray
    mask: object
    plane: np.ndarray          # [1, H, 1]
    x_tgt: np.ndarray
    k_tgt: np.ndarray
    y_u: np.ndarray
    x_u: np.ndarray
    x_ref_al: np.ndarray = None
    k_ref_al: np.ndarray = None
    x_ref_mv: np.ndarray = None
    k_ref_mv: np.ndarray = None


def _channels(img):
    return np.stack([img.real.data, img.imag.data]).astype(np.float32)


def _fft_ch(x):
    re, im = _fft2c_arrays(x[..., 0, :, :], x[..., 1, :, :])
    return np.stack([re, im], axis=-3)


def _ifft_ch(x):
    re, im = _ifft2c_arrays(x[..., 0, :, :], x[..., 1, :, :])
    return np.stack([re, im], axis=-3)


def prepare_record(rec, plan):
    """Build the constant tensors one record contributes to training."""
    h = rec.brain_mask.shape[0]
    if h != plan.image_size:
        raise ValidationError("record %d is %d px but the plan expects %d"
                              % (rec.record_id, h, plan.image_size))
    mask = make_mask(h, plan.accel, n_center=plan.n_center,
                     sigma_frac=plan.sigma_frac,
                     seed=_sub_seed(plan.mask_seed, rec.record_id))
    plane = mask.plane(np.float32)[None]          # [1, H, 1]
    x_tgt = _channels(rec.tgt)
    k_tgt = _fft_ch(x_tgt)
    y_u = k_tgt * plane
    x_u = _ifft_ch(y_u)
    rt = _RecordTensors(record_id=rec.record_id, brain_mask=rec.brain_mask,
                        mask=mask, plane=plane, x_tgt=x_tgt, k_tgt=k_tgt,
                        y_u=y_u, x_u=x_u)
    if plan.contrast_mode != "single":
        rt.x_ref_al = _channels(rec.ref_aligned)
        rt.k_ref_al = _fft_ch(rt.x_ref_al)
        rt.x_ref_mv = _channels(rec.ref_moved)
        rt.k_ref_mv = _fft_ch(rt.x_ref_mv)
    return rt


def _net_names(stage, plan):
    if stage == "synthesis":
        return tuple("synth_" + b for b in plan.branches())
    if stage == "registration":
        return ("registration",)
    return tuple("recon_" + b for b in plan.branches())


def _build_net(name, plan, params=None, rng=None):
    if name.startswith("synth"):
        return SynthNet(SynthNetConfig(base_channels=plan.base_channels,
                                       depth=plan.depth),
                        params=params, rng=rng)
    if name == "registration":
        return RegNet(RegNetConfig(in_size=plan.image_size,
                                   channels=plan.reg_channels,
                                   fc_hidden=plan.reg_fc_hidden),
                      params=params, rng=rng)
    return ReconNet(ReconNetConfig(in_channels=plan.recon_in_channels(),
                                   base_channels=plan.base_channels,
                                   depth=plan.depth),
                    params=params, rng=rng)


def _freeze_params(ps):
    for _, t in ps.items():
        t.requires_grad = False
        t.grad = None


def _nets_from_checkpoints(plan, checkpoints, stages_needed):
    """Inference-mode networks for already-finalised stages; their
    parameters are marked non-trainable so no graph builds behind them."""
    nets = {}
    for s in stages_needed:
        ck = checkpoints[s]
        for name in _net_names(s, plan):
            if name not in ck.param_sets:
                raise CheckpointIntegrityError(
                    "checkpoint for %r lacks parameters for %r" % (s, name))
            ps = ck.param_sets[name]
            _freeze_params(ps)
            nets[name] = _build_net(name, plan, params=ps).eval_mode()
    return nets


def _batched(ids, size):
    for i in range(0, len(ids), size):
        yield ids[i:i + size]


def _stack(rt_map, ids, attr):
    return np.stack([getattr(rt_map[r], attr) for r in ids])


def _apply_chunked(fn, x, chunk=16):
    parts = [fn(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def _frozen_synth(net, x):
    return _apply_chunked(lambda a: net(Tensor(a)).data, x)


def _compose_rows(a, b):
    """Vectorised geometry.compose over [N, 3] parameter rows."""
    c, s = np.cos(b[:, 2]), np.sin(b[:, 2])
    return np.stack([c * a[:, 0] - s * a[:, 1] + b[:, 0],
                     s * a[:, 0] + c * a[:, 1] + b[:, 1],
                     a[:, 2] + b[:, 2]], axis=1)


def _frozen_register(net, mov, fixed, n_iters=1):
    """Warp mov onto fixed with the frozen net, refining n_iters times.

    Each pass re-predicts from the original moving image warped by the
    running estimate, so the output is always a single resample.
    """
    def fn(pair):
        m, f = pair[:, 0], pair[:, 1]
        p, _ = net(Tensor(m), Tensor(f))
        return p.data

    def params_for(m):
        return _apply_chunked(fn, np.stack([m, fixed], axis=1))

    def warp_by(p):
        return warp_forward(mov, p[:, 0].astype(mov.dtype),
                            p[:, 1].astype(mov.dtype),
                            p[:, 2].astype(mov.dtype))

    est = params_for(mov).astype(np.float64)
    for _ in range(n_iters - 1):
        est = _compose_rows(est, params_for(warp_by(est)).astype(np.float64))
    return warp_by(est)


def compute_stage_inputs(stage, plan, frozen, rt_map, ids):
    """Per-record input arrays for a stage, with earlier stages applied.

    Everything upstream of the trained stage is constant, so each
    record's inputs are computed once here instead of every epoch.
    Returns {record_id: {name: array}}.
    """
    ids = list(ids)
    branches = plan.branches()
    out = {r: {} for r in ids}

    def put(name, stacked):
        for r, row in zip(ids, stacked):
            out[r][name] = row

    if stage == "synthesis":
        if "image" in branches:
            put("in_image", _stack(rt_map, ids, "x_ref_al"))
        if "kspace" in branches:
            put("in_kspace", _stack(rt_map, ids, "k_ref_al"))
        return out

    if stage == "registration":
        if "image" in branches:
            syn = _frozen_synth(frozen["synth_image"],
                                _stack(rt_map, ids, "x_ref_mv"))
            put("mov_image", syn)
        if "kspace" in branches:
            syn_k = _frozen_synth(frozen["synth_kspace"],
                                  _stack(rt_map, ids, "k_ref_mv"))
            put("mov_kspace", _ifft_ch(syn_k))
        put("x_u", _stack(rt_map, ids, "x_u"))
        return out

    # reconstruction
    x_u = _stack(rt_map, ids, "x_u")
    y_u = _stack(rt_map, ids, "y_u")
    if plan.contrast_mode == "single":
        if "image" in branches:
            put("in_image", x_u)
        if "kspace" in branches:
            put("in_kspace", y_u)
    elif plan.contrast_mode == "concat":
        if "image" in branches:
            put("in_image", np.concatenate(
                [_stack(rt_map, ids, "x_ref_mv"), x_u], axis=1))
        if "kspace" in branches:
            put("in_kspace", np.concatenate(
                [_stack(rt_map, ids, "k_ref_mv"), y_u], axis=1))
    else:
        g = frozen["registration"]
        if "image" in branches:
            syn = _frozen_synth(frozen["synth_image"],
                                _stack(rt_map, ids, "x_ref_mv"))
            reg = _frozen_register(g, syn, x_u,
                                   plan.reg_refine_iters)
            put("in_image", np.concatenate([reg, x_u], axis=1))
        if "kspace" in branches:
            syn_k = _frozen_synth(frozen["synth_kspace"],
                                  _stack(rt_map, ids, "k_ref_mv"))
            reg_k = _frozen_register(g, _ifft_ch(syn_k), x_u,
                                     plan.reg_refine_iters)
            put("in_kspace", np.concatenate([_fft_ch(reg_k), y_u], axis=1))
    put("y_u", y_u)
    for r in ids:
        out[r]["plane"] = rt_map[r].plane
    return out


def _gather_batch(stage_in, rt_map, ids):
    names = stage_in[ids[0]].keys()
    batch = {n: np.stack([stage_in[r][n] for r in ids]) for n in names}
    batch["gt_image"] = _stack(rt_map, ids, "x_tgt")
    batch["gt_kspace"] = _stack(rt_map, ids, "k_tgt")
    return batch


def forward_stage(stage, plan, nets, batch):
    """Run the trained stage's networks on one batch.

    Returns the outputs dict that stage_loss consumes ([N, 2, H, W]
    re/im channel tensors per active branch).
    """
    branches = plan.branches()
    out = {}
    if stage == "synthesis":
        if "image" in branches:
            out["image"] = nets["synth_image"](Tensor(batch["in_image"]))
        if "kspace" in branches:
            out["kspace"] = nets["synth_kspace"](Tensor(batch["in_kspace"]))
    elif stage == "registration":
        g = nets["registration"]
        fixed = Tensor(batch["x_u"])
        if "image" in branches:
            _, warped = g(Tensor(batch["mov_image"]), fixed)
            out["image"] = warped
        if "kspace" in branches:
            _, warped_k = g(Tensor(batch["mov_kspace"]), fixed)
            out["kspace"] = fft2c_channels(warped_k)
    elif stage == "reconstruction":
        if "image" in branches:
            raw = nets["recon_image"](Tensor(batch["in_image"]))
            k_dc = data_consistency_channels(fft2c_channels(raw),
                                             batch["y_u"], batch["plane"])
            out["image"] = ifft2c_channels(k_dc)
        if "kspace" in branches:
            raw_k = nets["recon_kspace"](Tensor(batch["in_kspace"]))
            out["kspace"] = data_consistency_channels(raw_k, batch["y_u"],
                                                      batch["plane"])
    else:
        raise ValidationError("unknown stage %r, expected one of %s"
                              % (stage, ", ".join(STAGES)))
    return out


def _batch_loss(stage, plan, nets, stage_in, rt_map, ids):
    batch = _gather_batch(stage_in, rt_map, ids)
    outputs = forward_stage(stage, plan, nets, batch)
    gt = {"image": Tensor(batch["gt_image"]),
          "kspace": Tensor(batch["gt_kspace"])}
    return stage_loss(stage, outputs, gt, plan.weights,
                      domain_mode=plan.domain_mode,
                      image_loss=plan.image_loss)


def _validation_loss(stage, plan, nets, stage_in, rt_map, ids, batch_size):
    for net in nets.values():
        net.eval_mode()
    total = 0.0
    for chunk in _batched(ids, batch_size):
        rep = _batch_loss(stage, plan, nets, stage_in, rt_map, chunk)
        total += rep.total * len(chunk)
    for net in nets.values():
        net.train_mode()
    return total / len(ids)


def _snapshot(param_sets):
    return {name: {n: t.data.copy() for n, t in ps.items()}
            for name, ps in param_sets.items()}


def _restore(param_sets, snap):
    for name, ps in param_sets.items():
        for n, t in ps.items():
            t.data[...] = snap[name][n]


def check_stage_order(stage, plan, checkpoints):
    """Freeze-and-advance gate: every earlier required stage must have a
    finalised checkpoint whose config matches the plan."""
    if stage not in STAGES:
        raise ValidationError("unknown stage %r, expected one of %s"
                              % (stage, ", ".join(STAGES)))
    required = plan.required_stages()
    if stage not in required:
        raise StageOrderError(
            "stage %r is bypassed under contrast mode %r; train %s instead"
            % (stage, plan.contrast_mode, " -> ".join(required)))
    prior = required[:required.index(stage)]
    for pre in prior:
        ck = checkpoints.get(pre) if checkpoints else None
        if ck is None:
            raise StageOrderError(
                "stage %r requires a finalised %r checkpoint; %r has not "
                "been trained" % (stage, pre, pre))
        if not ck.finalised:
            raise CheckpointIntegrityError(
                "checkpoint for stage %r is not finalised; rerun it to "
                "completion before training %r" % (pre, stage))
        if ck.stage != pre:
            raise CheckpointIntegrityError(
                "checkpoint supplied for %r was trained as %r" % (pre,
                                                                  ck.stage))
        if ck.config != plan.to_dict():
            raise CheckpointIntegrityError(
                "checkpoint for %r was trained under a different plan; "
                "regenerate the chain with one config" % pre)
    return prior


def train_stage(stage, dataset, plan, checkpoints=None, seed=0,
                out_dir=None, run_log=None):
    """Train one stage against frozen predecessors.

    Parameters
    ----------
    stage : str
        Which stage to train; earlier required stages must appear
        finalised in `checkpoints`.
    dataset : Dataset
        Provides "train" and "val" splits of contrast pair records.
    plan : StagePlan
    checkpoints : dict
        stage name -> Checkpoint for already-trained stages.
    seed : int
        Root seed; initialisation and epoch shuffles derive from it.
    out_dir : str
        If given, the finalised checkpoint lands here as <stage>.ckpt.
    run_log : RunLog

    Returns
    -------
    Checkpoint
        Finalised, with best-validation parameters restored.
    """
    plan.validate()
    prior = check_stage_order(stage, plan, checkpoints)
    settings = plan.stages[stage]
    stage_idx = STAGES.index(stage)

    train_recs = dataset.split("train")
    val_recs = dataset.split("val")
    if not train_recs or not val_recs:
        raise ValidationError("training needs non-empty train and val "
                              "splits, got %d/%d"
                              % (len(train_recs), len(val_recs)))
    rt_map = {r.record_id: prepare_record(r, plan)
              for r in train_recs + val_recs}
    train_ids = [r.record_id for r in train_recs]
    val_ids = [r.record_id for r in val_recs]

    frozen = _nets_from_checkpoints(plan, checkpoints or {}, prior)
    train_in = compute_stage_inputs(stage, plan, frozen, rt_map, train_ids)
    val_in = compute_stage_inputs(stage, plan, frozen, rt_map, val_ids)

    nets = {}
    for k, name in enumerate(_net_names(stage, plan)):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, stage_idx, k]))
        nets[name] = _build_net(name, plan, rng=rng).train_mode()
    opt = [(nets[n].params, AdamState.create(nets[n].params, settings.lr))
           for n in nets]

    param_sets = {n: nets[n].params for n in nets}
    best_snap = _snapshot(param_sets)
    best_val = np.inf
    epochs_since_best = 0
    history = []
    step = 0
    for epoch in range(settings.max_epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, stage_idx, epoch, 7]))
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        for ids in _batched(order, settings.batch_size):
            for ps, _ in opt:
                ps.zero_grads()
            rep = _batch_loss(stage, plan, nets, train_in, rt_map, ids)
            rep.total_node.backward()
            for ps, st in opt:
                adam_step(ps, st)
            if run_log is not None:
                run_log.log_step(step, rep)
            step += 1
        val_loss = _validation_loss(stage, plan, nets, val_in, rt_map,
                                    val_ids, settings.batch_size)
        history.append(val_loss)
        if run_log is not None:
            run_log.log_epoch(stage, epoch, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_snap = _snapshot(param_sets)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= settings.patience:
                break
    _restore(param_sets, best_snap)

    ck = Checkpoint(stage=stage, param_sets=param_sets,
                    config=plan.to_dict(), seed=seed, val_history=history,
                    finalised=True)
    ck.compute_hashes()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ck.save(os.path.join(out_dir, stage + ".ckpt"))
    return ck


def train_all(dataset, plan, seed=0, out_dir=None, run_log=None):
    """Train every stage the contrast mode requires, in order."""
    checkpoints = {}
    for stage in plan.required_stages():
        checkpoints[stage] = train_stage(stage, dataset, plan, checkpoints,
                                         seed=seed, out_dir=out_dir,
                                         run_log=run_log)
    return checkpoints


def _check_eval_checkpoints(plan, checkpoints):
    for stage in plan.required_stages():
        ck = checkpoints.get(stage) if checkpoints else None
        if ck is None:
            raise StageOrderError("evaluation needs a finalised %r "
                                  "checkpoint" % stage)
        if not ck.finalised:
            raise CheckpointIntegrityError("checkpoint for %r is not "
                                           "finalised" % stage)
        if ck.config != plan.to_dict():
            raise CheckpointIntegrityError(
                "checkpoint for %r does not match the evaluation plan" % stage)


def _mag(ch):
    return np.hypot(ch[0], ch[1])


@dataclass
class EvalResult:
    split: str
    per_record: list
    aggregates: dict
    record_ids: list
    outputs: list = None

    def aggregate_rows(self, plan, cell_id=""):
        rows = []
        for (stage, branch), agg in sorted(self.aggregates.items(),
                                           key=lambda kv: (STAGES.index(
                                               kv[0][0]), kv[0][1])):
            rows.append({"cell": cell_id,
                         "domain_mode": plan.domain_mode,
                         "contrast_mode": plan.contrast_mode,
                         "accel": plan.accel,
                         "stage": stage, "branch": branch,
                         "psnr_mean": agg["psnr_mean"],
                         "psnr_std": agg["psnr_std"],
                         "ssim_mean": agg["ssim_mean"],
                         "ssim_std": agg["ssim_std"],
                         "n": agg["n"]})
        return rows

    def summary_row(self, plan, cell_id=""):
        row = {"cell": cell_id, "domain_mode": plan.domain_mode,
               "contrast_mode": plan.contrast_mode, "accel": plan.accel,
               "psnr_image": None, "ssim_image": None,
               "psnr_kspace": None, "ssim_kspace": None}
        for branch in plan.branches():
            agg = self.aggregates.get(("reconstruction", branch))
            if agg is not None:
                row["psnr_" + branch] = agg["psnr_mean"]
                row["ssim_" + branch] = agg["ssim_mean"]
        return row


def evaluate(checkpoints, dataset, split, plan, with_outputs=False,
             chunk=16):
    """Metrics for every stage that exists under the plan's modes.

    The final row per branch is the reconstruction after data
    consistency; in fused mode the synthesis and registration stages
    are also scored against the motion-free target.  Returns an
    EvalResult with per-record rows and per-(stage, branch) aggregates.
    """
    plan.validate()
    _check_eval_checkpoints(plan, checkpoints)
    recs = dataset.split(split)
    if not recs:
        raise ValidationError("split %r is empty" % split)
    required = plan.required_stages()
    nets = _nets_from_checkpoints(plan, checkpoints, required)
    rt_map = {r.record_id: prepare_record(r, plan) for r in recs}
    ids = [r.record_id for r in recs]
    rec_by_id = {r.record_id: r for r in recs}
    branches = plan.branches()

    # stage name -> branch -> {record_id: [2, H, W] image-space estimate}
    estimates = {s: {b: {} for b in branches} for s in required}

    if plan.contrast_mode == "fused":
        if "image" in branches:
            syn_al = _frozen_synth(nets["synth_image"],
                                   _stack(rt_map, ids, "x_ref_al"))
            for r, row in zip(ids, syn_al):
                estimates["synthesis"]["image"][r] = row
        if "kspace" in branches:
            syn_al_k = _frozen_synth(nets["synth_kspace"],
                                     _stack(rt_map, ids, "k_ref_al"))
            for r, row in zip(ids, _ifft_ch(syn_al_k)):
                estimates["synthesis"]["kspace"][r] = row
        x_u = _stack(rt_map, ids, "x_u")
        if "image" in branches:
            mov = _frozen_synth(nets["synth_image"],
                                _stack(rt_map, ids, "x_ref_mv"))
            reg = _frozen_register(nets["registration"], mov, x_u,
                                   plan.reg_refine_iters)
            for r, row in zip(ids, reg):
                estimates["registration"]["image"][r] = row
        if "kspace" in branches:
            mov_k = _ifft_ch(_frozen_synth(nets["synth_kspace"],
                                           _stack(rt_map, ids, "k_ref_mv")))
            reg_k = _frozen_register(nets["registration"], mov_k, x_u,
                                     plan.reg_refine_iters)
            for r, row in zip(ids, reg_k):
                estimates["registration"]["kspace"][r] = row

    recon_in = compute_stage_inputs("reconstruction", plan, nets, rt_map, ids)
    for ids_chunk in _batched(ids, chunk):
        batch = _gather_batch(recon_in, rt_map, ids_chunk)
        out = forward_stage("reconstruction", plan, nets, batch)
        if "image" in branches:
            for r, row in zip(ids_chunk, out["image"].data):
                estimates["reconstruction"]["image"][r] = row
        if "kspace" in branches:
            for r, row in zip(ids_chunk, _ifft_ch(out["kspace"].data)):
                estimates["reconstruction"]["kspace"][r] = row

    per_record = []
    values = {}
    for stage in required:
        for branch in branches:
            vals = []
            for r in ids:
                rt = rt_map[r]
                truth = _mag(rt.x_tgt)
                est = _mag(estimates[stage][branch][r])
                m = _metrics(est, truth, rt.brain_mask)
                per_record.append({"record_id": r, "stage": stage,
                                   "branch": branch, "psnr": m.psnr,
                                   "ssim": m.ssim,
                                   "n_pixels": m.n_pixels})
                vals.append((m.psnr, m.ssim, m.n_pixels))
            values[(stage, branch)] = vals
    aggregates = {}
    for key, vals in values.items():
        ps = np.array([v[0] for v in vals], dtype=np.float64)
        ss = np.array([v[1] for v in vals], dtype=np.float64)
        aggregates[key] = {"psnr_mean": float(ps.mean()),
                           "psnr_std": float(ps.std()),
                           "ssim_mean": float(ss.mean()),
                           "ssim_std": float(ss.std()),
                           "n": len(vals)}

    outputs = None
    if with_outputs:
        outputs = []
        for r in ids:
            rt = rt_map[r]
            panels = {"zero_filled": _mag(rt.x_u)}
            if plan.contrast_mode == "fused":
                if "image" in branches:
                    panels["synthesis"] = _mag(
                        estimates["synthesis"]["image"][r])
                    panels["registration"] = _mag(
                        estimates["registration"]["image"][r])
                else:
                    panels["synthesis"] = _mag(
                        estimates["synthesis"]["kspace"][r])
                    panels["registration"] = _mag(
                        estimates["registration"]["kspace"][r])
            final_branch = "image" if "image" in branches else "kspace"
            panels["reconstruction"] = _mag(
                estimates["reconstruction"][final_branch][r])
            if plan.domain_mode == "dual":
                panels["recon_kspace"] = _mag(
                    estimates["reconstruction"]["kspace"][r])
            outputs.append(panels)
    return EvalResult(split=split, per_record=per_record,
                      aggregates=aggregates, record_ids=ids,
                      outputs=outputs)


RECORD_METRIC_COLUMNS = ("record_id", "stage", "branch", "psnr", "ssim",
                         "n_pixels")
AGGREGATE_COLUMNS = ("cell", "domain_mode", "contrast_mode", "accel",
                     "stage", "branch", "psnr_mean", "psnr_std",
                     "ssim_mean", "ssim_std", "n")
SUMMARY_COLUMNS = ("cell", "domain_mode", "contrast_mode", "accel",
                   "psnr_image", "ssim_image", "psnr_kspace", "ssim_kspace")


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "%.6f" % v
    return v


def write_csv(path, columns, rows):
    """Rows are dicts; floats serialise at fixed precision so reruns
    produce byte-identical files."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt_cell(row[c]) for c in columns])


def cell_name(contrast_mode, domain_mode, accel):
    return "%s-%s-%dx" % (contrast_mode, domain_mode, accel)


def _run_cell(args):
    (contrast_mode, domain_mode, accel, dataset_root, out_dir, plan_dict,
     seed, eval_split) = args
    plan = StagePlan.from_dict(plan_dict)
    plan.contrast_mode = contrast_mode
    plan.domain_mode = domain_mode
    plan.accel = accel
    plan.validate()
    cid = cell_name(contrast_mode, domain_mode, accel)
    cell_dir = os.path.join(out_dir, cid)
    os.makedirs(cell_dir, exist_ok=True)
    dataset = Dataset.load(dataset_root)
    run_log = RunLog(cell_dir)
    checkpoints = train_all(dataset, plan, seed=seed, out_dir=cell_dir,
                            run_log=run_log)
    result = evaluate(checkpoints, dataset, eval_split, plan)
    run_log.finish(seed, plan.to_dict())
    agg_rows = result.aggregate_rows(plan, cid)
    write_csv(os.path.join(cell_dir, "metrics.csv"), AGGREGATE_COLUMNS,
              agg_rows)
    write_csv(os.path.join(cell_dir, "records.csv"), RECORD_METRIC_COLUMNS,
              result.per_record)
    return cid, agg_rows, result.summary_row(plan, cid)


def run_ablation(cells, dataset_root, base_plan, out_dir, seed=0,
                 eval_split="test"):
    """Train and score one pipeline per (contrast, domain, accel) cell.

    cells : list of (contrast_mode, domain_mode, accel)
    The DDMC_THREADS environment variable caps the worker processes;
    the default is one worker per cell.  Each cell is self-contained
    and seeded, so results do not depend on the worker count.
    """
    cells = [tuple(c) for c in cells]
    if len(set(cells)) != len(cells):
        raise ValidationError("ablation grid contains duplicate cells")
    if not cells:
        raise ValidationError("ablation grid is empty")
    os.makedirs(out_dir, exist_ok=True)
    plan_dict = base_plan.to_dict()
    jobs = [(cm, dm, ac, dataset_root, out_dir, plan_dict, seed, eval_split)
            for cm, dm, ac in cells]
    env = os.environ.get("DDMC_THREADS", "")
    workers = int(env) if env else len(cells)
    if workers < 1:
        raise ValidationError("DDMC_THREADS must be >= 1, got %r" % env)
    workers = min(workers, len(cells))
    if workers == 1:
        done = [_run_cell(j) for j in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_run_cell, jobs))
    by_cell = {cid: (rows, summary) for cid, rows, summary in done}
    all_rows, summaries = [], []
    for cm, dm, ac in cells:
        rows, summary = by_cell[cell_name(cm, dm, ac)]
        all_rows.extend(rows)
        summaries.append(summary)
    write_csv(os.path.join(out_dir, "metrics.csv"), AGGREGATE_COLUMNS,
              all_rows)
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS,
              summaries)
    return summaries
