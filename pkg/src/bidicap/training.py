"""Two-stage training.

Stage 1 minimizes the joint cross-entropy of both flows with a warmup/decay
learning-rate schedule and two-pass scheduled sampling. Stage 2 fine-tunes
with two-flow self-critical policy gradients: N sampled captions per flow and
image, each sample's baseline being the mean reward of the other N-1 samples
of the same flow.

Randomness discipline: every stochastic choice draws from a generator derived
from (seed, stream, epoch, batch). Streams are split per flow, so with the
cross-flow weight at zero a forward-flow-only run consumes exactly the draws
a standalone unidirectional trainer would, and loss curves match bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx
from .data import SpecialTokens, Vocabulary, make_pairs, strip_specials
from .decoding import DecodeConfig, evaluate
from .errors import ConfigError, ContractError, InputError, TrainingError
from .incremental import DecodeSession
from .metrics import DocumentFrequency, build_document_frequency, cider
from .model import (
    ParameterSet,
    decode_train_batch,
    decode_unidirectional,
    encode,
    load_checkpoint,
    read_tensor_file,
    save_checkpoint,
    write_tensor_file,
)
from .numerics import Tensor

# rng stream ids; per-flow separation keeps the flows decoupled at lam=0
S_PAIR, S_SHUFFLE, S_ENC, S_FWD, S_BWD, S_SS_FWD, S_SS_BWD, S_SAMPLE, S_SUBSET = range(9)


def stream_rng(seed: int, stream: int, *rest: int):
    return np.random.default_rng([int(seed), int(stream), *map(int, rest)])


@dataclass
class TrainConfig:
    batch_size: int = 10
    xe_epochs: int = 15
    base_lr: float = 5e-4
    warmup_steps: int = 20000
    ss_increment: float = 0.05
    ss_every_epochs: int = 5
    ss_max: float = 0.25
    sc_epochs: int = 15
    sc_lr: float = 1e-5
    n_samples: int = 5  # per direction, per image
    reward: str = "cider"
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    xe_sum_loss: bool = False  # raw-sum loss instead of per-token normalization
    sc_images_per_epoch: int = 0  # 0 = full split
    val_decode: str = "greedy"

    def validate(self) -> "TrainConfig":
        for name in ("batch_size", "xe_epochs", "base_lr", "warmup_steps",
                     "sc_epochs", "sc_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_samples < 2:
            raise ConfigError("average-of-rest baseline needs n_samples >= 2")
        if self.reward not in ("cider", "cider-d"):
            raise ConfigError(f"reward must be cider or cider-d, got {self.reward!r}")
        if self.val_decode not in ("greedy", "beam"):
            raise ConfigError(f"val_decode must be greedy or beam, got {self.val_decode!r}")
        return self


# ---------------------------------------------------------------------------
# losses and schedules
# ---------------------------------------------------------------------------


def joint_xe_loss_batch(logits_f: Tensor, logits_b: Tensor, tgt_f: np.ndarray,
                        tgt_b: np.ndarray, pad_id: int, normalize: bool = True
                        ) -> Tensor:
    """Joint cross-entropy over both flows, pads excluded. Normalized mode
    divides the summed NLL by the total non-pad token count of both flows."""
    sum_f = nx.log_softmax_nll(logits_f, tgt_f, ignore_index=pad_id, normalize=False)
    sum_b = nx.log_softmax_nll(logits_b, tgt_b, ignore_index=pad_id, normalize=False)
    total = nx.add(sum_f, sum_b)
    if not normalize:
        return total
    count = int((tgt_f != pad_id).sum() + (tgt_b != pad_id).sum())
    return nx.scale(total, 1.0 / count)


def joint_xe_loss(logits_f: Tensor, logits_b: Tensor, pair, pad_id: int = 0,
                  normalize: bool = True) -> Tensor:
    return joint_xe_loss_batch(logits_f, logits_b, pair.fwd_target, pair.bwd_target,
                               pad_id, normalize)


def lr_schedule(step: int, warmup_steps: int, base_lr: float) -> float:
    """Warmup/decay schedule proportional to min(step^-0.5, step*warmup^-1.5),
    scaled so the peak (at step == warmup_steps) equals base_lr."""
    if step < 1:
        raise ContractError(f"lr_schedule needs step >= 1, got {step}")
    shape = min(step ** -0.5, step * warmup_steps ** -1.5)
    return base_lr * shape * math.sqrt(warmup_steps)


def scheduled_sampling_prob(epoch: int, increment: float = 0.05,
                            every_epochs: int = 5, max_prob: float = 0.25) -> float:
    return min((epoch // every_epochs) * increment, max_prob)


class Adam:
    """Adam over a ParameterSet, with per-tensor first/second moment state."""

    def __init__(self, params: ParameterSet, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.named()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.named()}

    def step(self, grads: dict, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.named():
            g = grads.get(name)
            if g is None:
                continue
            kernels.adam_update(
                p.data.reshape(-1), np.ascontiguousarray(g.reshape(-1)),
                self.m[name].reshape(-1), self.v[name].reshape(-1),
                lr, self.beta1, self.beta2, self.eps, c1, c2,
            )

    def save(self, path: str) -> None:
        arrays = {}
        for name in self.m:
            arrays[f"m.{name}"] = self.m[name]
            arrays[f"v.{name}"] = self.v[name]
        write_tensor_file(path, {"kind": "optim", "step": self.step_count}, arrays)

    def load(self, path: str) -> None:
        meta, arrays = read_tensor_file(path)
        self.step_count = int(meta["step"])
        for name in self.m:
            self.m[name] = arrays[f"m.{name}"].astype(self.m[name].dtype)
            self.v[name] = arrays[f"v.{name}"].astype(self.v[name].dtype)


def take_grads(params: ParameterSet) -> dict:
    out = {}
    for name, p in params.named():
        if p.grad is not None:
            out[name] = p.grad
            p.grad = None
    return out


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = nx.global_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# stage 1: cross-entropy
# ---------------------------------------------------------------------------


def stack_pairs(pairs, pad_id: int):
    """Pad a list of BiCaptionPairs to the batch max length and stack."""
    length = max(p.fwd_input.shape[0] for p in pairs)
    out = []
    for name in ("fwd_input", "fwd_target", "bwd_input", "bwd_target"):
        arr = np.full((len(pairs), length), pad_id, dtype=np.int64)
        for i, p in enumerate(pairs):
            row = getattr(p, name)
            arr[i, : row.shape[0]] = row
        out.append(arr)
    return tuple(out)


def _stack_features(split, indices) -> np.ndarray:
    shapes = {split.features[i].features.shape for i in indices}
    if len(shapes) != 1:
        raise InputError(
            f"batched training needs a constant region count per image, got {shapes}"
        )
    return np.stack([split.features[i].features for i in indices])


def _mix_scheduled_sampling(inputs: np.ndarray, greedy_logits: np.ndarray,
                            p: float, pad_id: int, rng) -> np.ndarray:
    """Replace ground-truth input tokens with first-pass greedy predictions,
    independently with probability p (never the prefix, never pads)."""
    preds = greedy_logits.argmax(axis=-1)
    shifted = np.concatenate([inputs[:, :1], preds[:, :-1]], axis=1)
    coin = rng.random(inputs.shape) < p
    coin[:, 0] = False
    coin &= inputs != pad_id
    return np.where(coin, shifted, inputs)


def _log_line(run_dir, entry: dict, fresh: bool = False) -> None:
    if run_dir is None:
        return
    path = os.path.join(run_dir, "metrics.jsonl")
    with open(path, "w" if fresh else "a", encoding="utf-8") as f:
        f.write(json.dumps(entry) + "\n")


def _state_path(run_dir):
    return os.path.join(run_dir, "train_state.json")


def _read_state(run_dir, stage: str) -> dict | None:
    if run_dir is None:
        return None
    path = _state_path(run_dir)
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as f:
        state = json.load(f)
    return state if state.get("stage") == stage else None


def _write_state(run_dir, state: dict) -> None:
    if run_dir is None:
        return
    tmp = _state_path(run_dir) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(state, f)
    os.replace(tmp, _state_path(run_dir))


def _validate(params, val_split, vocab, tcfg) -> dict:
    report, _ = evaluate(params, val_split, DecodeConfig(), vocab,
                         method=tcfg.val_decode)
    return {
        "val_cider_l2r": report["l2r"]["cider"],
        "val_cider_r2l": report["r2l"]["cider"],
        "val_cider_ensemble": report["ensemble"]["cider"],
    }


def train_xe(params: ParameterSet, train_split, val_split, vocab: Vocabulary,
             tcfg: TrainConfig, seed: int, run_dir: str | None = None,
             flows: str = "both") -> list[dict]:
    """Stage-1 training. `flows` selects the joint two-flow objective ("both")
    or a standalone unidirectional baseline over one flow ("fwd"/"bwd", which
    requires the cross-flow weight to be zero).

    Returns one history entry per epoch; when run_dir is given, also appends
    metrics lines, keeps xe_last/xe_best checkpoints (best by ensemble
    validation score) and resumes from xe_last if interrupted.
    """
    tcfg.validate()
    mcfg = params.config
    if flows not in ("both", "fwd", "bwd"):
        raise ConfigError(f"flows must be both|fwd|bwd, got {flows!r}")
    if flows != "both" and mcfg.lam != 0.0:
        raise ConfigError("single-flow training requires lam=0 (flows decouple)")
    pad = vocab.specials.pad
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    optimizer = Adam(params, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    start_epoch, global_step, best = 0, 0, -math.inf
    state = _read_state(run_dir, "xe")
    if state is not None and state["next_epoch"] > 0:
        start_epoch = state["next_epoch"]
        global_step = state["global_step"]
        best = state["best"]
        restored, _ = load_checkpoint(os.path.join(ckpt_dir, "xe_last.ckpt"))
        for name, t in params.named():
            t.data[...] = restored[name].data.astype(t.dtype)
        optimizer.load(os.path.join(ckpt_dir, "xe_last.optim"))

    history = []
    for epoch in range(start_epoch, tcfg.xe_epochs):
        pair_rng = stream_rng(seed, S_PAIR, epoch)
        pairs, image_idx = [], []
        for i, record in enumerate(train_split.records):
            for p in make_pairs(record, vocab, pair_rng, mcfg.max_len):
                pairs.append(p)
                image_idx.append(i)
        order = stream_rng(seed, S_SHUFFLE, epoch).permutation(len(pairs))
        p_ss = scheduled_sampling_prob(epoch, tcfg.ss_increment,
                                       tcfg.ss_every_epochs, tcfg.ss_max)
        losses = []
        last_lr = 0.0
        for bi, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            sel = order[lo : lo + tcfg.batch_size]
            batch_pairs = [pairs[i] for i in sel]
            feats = _stack_features(train_split, [image_idx[i] for i in sel])
            fwd_in, fwd_tgt, bwd_in, bwd_tgt = stack_pairs(batch_pairs, pad)

            global_step += 1
            last_lr = lr_schedule(global_step, tcfg.warmup_steps, tcfg.base_lr)
            rng_enc = stream_rng(seed, S_ENC, epoch, bi)
            rng_f = stream_rng(seed, S_FWD, epoch, bi)
            rng_b = stream_rng(seed, S_BWD, epoch, bi)

            ctx = encode(feats, params, mcfg, training=True, rng=rng_enc)
            if flows == "both":
                if p_ss > 0.0:
                    with nx.no_grad():
                        g_f, g_b = decode_train_batch(
                            ctx, fwd_in, bwd_in, params, mcfg, True, rng_f, rng_b)
                    fwd_in = _mix_scheduled_sampling(
                        fwd_in, g_f.data, p_ss, pad, stream_rng(seed, S_SS_FWD, epoch, bi))
                    bwd_in = _mix_scheduled_sampling(
                        bwd_in, g_b.data, p_ss, pad, stream_rng(seed, S_SS_BWD, epoch, bi))
                logits_f, logits_b = decode_train_batch(
                    ctx, fwd_in, bwd_in, params, mcfg, True, rng_f, rng_b)
                loss = joint_xe_loss_batch(logits_f, logits_b, fwd_tgt, bwd_tgt,
                                           pad, normalize=not tcfg.xe_sum_loss)
            else:
                inputs, targets = (fwd_in, fwd_tgt) if flows == "fwd" else (bwd_in, bwd_tgt)
                rng_flow = rng_f if flows == "fwd" else rng_b
                ss_stream = S_SS_FWD if flows == "fwd" else S_SS_BWD
                if p_ss > 0.0:
                    with nx.no_grad():
                        g = decode_unidirectional(ctx, inputs, params, mcfg, True, rng_flow)
                    inputs = _mix_scheduled_sampling(
                        inputs, g.data, p_ss, pad, stream_rng(seed, ss_stream, epoch, bi))
                logits = decode_unidirectional(ctx, inputs, params, mcfg, True, rng_flow)
                loss = nx.log_softmax_nll(logits, targets, ignore_index=pad,
                                          normalize=not tcfg.xe_sum_loss)

            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite loss {loss_val} at epoch {epoch} step {global_step}"
                )
            losses.append(loss_val)
            nx.backward(loss)
            grads = take_grads(params)
            clip_global_norm(grads, tcfg.grad_clip)
            optimizer.step(grads, last_lr)

        entry = {"stage": "xe", "epoch": epoch, "step": global_step,
                 "loss": float(np.mean(losses)), "lr": last_lr}
        entry.update(_validate(params, val_split, vocab, tcfg))
        history.append(entry)
        _log_line(run_dir, entry, fresh=(epoch == 0))
        if ckpt_dir is not None:
            save_checkpoint(params, mcfg, os.path.join(ckpt_dir, "xe_last.ckpt"))
            optimizer.save(os.path.join(ckpt_dir, "xe_last.optim"))
            if entry["val_cider_ensemble"] > best:
                best = entry["val_cider_ensemble"]
                save_checkpoint(params, mcfg, os.path.join(ckpt_dir, "xe_best.ckpt"))
            _write_state(run_dir, {"stage": "xe", "next_epoch": epoch + 1,
                                   "global_step": global_step, "best": best})
    return history


# ---------------------------------------------------------------------------
# stage 2: self-critical fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class SampledSequence:
    tokens: list[int]  # generated order; includes eos when emitted
    token_logps: list[float]
    with_eos: bool

    @property
    def logprob(self) -> float:
        return float(sum(self.token_logps))


# Alignment-padding sentinel for re-scoring targets. The sampled tokens
# themselves may legitimately include the pad id (an untrained model can emit
# it), so alignment positions are masked with an id no vocabulary uses.
TARGET_MASK = -1


def sample_pair_arrays(fwd_tokens, bwd_tokens, specials: SpecialTokens):
    """Teacher-forcing arrays that re-create a sampled pair exactly.

    Inputs are the direction prefix plus the raw emitted tokens (minus the
    final emission), padded with the pad id; that is literally what the
    incremental session consumed, including the pad-extension after an early
    finish. Targets are the raw emissions with alignment positions masked."""
    length = max(len(fwd_tokens), len(bwd_tokens))
    out = []
    for tokens, prefix in ((fwd_tokens, specials.l2r), (bwd_tokens, specials.r2l)):
        if not 1 <= len(tokens) <= length:
            raise ContractError("sampled sequences must be non-empty")
        inp = np.full(length, specials.pad, dtype=np.int64)
        tgt = np.full(length, TARGET_MASK, dtype=np.int64)
        inp[0] = prefix
        inp[1 : len(tokens)] = tokens[:-1]
        tgt[: len(tokens)] = tokens
        out.extend((inp, tgt))
    return tuple(out)


def sample_captions(params, features, n: int, rng, specials: SpecialTokens,
                    max_steps: int | None = None, temperature: float = 1.0
                    ) -> list[tuple[SampledSequence, SampledSequence]]:
    """Draw n step-synchronous sample pairs (multinomial per step per flow).

    Sample i of each flow is cross-flow context for sample i of the other.
    Finished lanes keep feeding pads so the remaining lanes see the same
    context a teacher-forced pass over the padded pair would. Token log-probs
    are under the model distribution (temperature only biases the choice;
    temperature=0 degenerates to argmax)."""
    model_list = [params] if isinstance(params, ParameterSet) else list(params)
    from .decoding import encode_image  # local import avoids a module cycle

    ctxs = encode_image(model_list, features)
    mcfg = model_list[0].config
    steps = max_steps if max_steps is not None else mcfg.max_len + 1
    session = DecodeSession(model_list, ctxs, n, n)
    lanes = {
        "fwd": [SampledSequence([], [], False) for _ in range(n)],
        "bwd": [SampledSequence([], [], False) for _ in range(n)],
    }
    inputs = {"fwd": np.full(n, specials.l2r, dtype=np.int64),
              "bwd": np.full(n, specials.r2l, dtype=np.int64)}
    finished = {"fwd": np.zeros(n, dtype=bool), "bwd": np.zeros(n, dtype=bool)}
    for _ in range(steps):
        if finished["fwd"].all() and finished["bwd"].all():
            break
        dist_f, dist_b = session.step(inputs["fwd"], inputs["bwd"])
        for flow, dist in (("fwd", dist_f), ("bwd", dist_b)):
            if temperature == 0.0:
                choice = dist.argmax(axis=1)
            else:
                p = dist if temperature == 1.0 else _temper(dist, temperature)
                choice = _sample_rows(p, rng)
            logp = np.log(np.maximum(dist[np.arange(n), choice], 1e-300))
            nxt = inputs[flow]
            for i in range(n):
                if finished[flow][i]:
                    nxt[i] = specials.pad
                    continue
                tok = int(choice[i])
                lane = lanes[flow][i]
                lane.tokens.append(tok)
                lane.token_logps.append(float(logp[i]))
                if tok == specials.eos:
                    lane.with_eos = True
                    finished[flow][i] = True
                    nxt[i] = specials.pad
                else:
                    nxt[i] = tok
    return list(zip(lanes["fwd"], lanes["bwd"]))


def _temper(dist: np.ndarray, temperature: float) -> np.ndarray:
    logp = np.log(np.maximum(dist, 1e-300)) / temperature
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _sample_rows(probs: np.ndarray, rng) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cum = probs.cumsum(axis=1)
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def average_of_rest_advantages(rewards) -> np.ndarray:
    """advantage_n = r_n - mean of the other rewards. Computed from pairwise
    differences so constant rewards give exact zeros and N=2 is exactly
    antisymmetric."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("average-of-rest baseline needs a flat vector with N >= 2")
    diff = r[:, None] - r[None, :]
    return diff.sum(axis=1) / (r.size - 1)


@dataclass
class ScstStats:
    pseudo_loss: float
    mean_reward_fwd: float
    mean_reward_bwd: float
    n_empty: int = 0


def scst_step(params: ParameterSet, batch, vocab: Vocabulary, df: DocumentFrequency,
              optimizer: Adam, lr: float, n_samples: int, rng,
              reward_variant: str = "cider", grad_clip: float = 5.0) -> ScstStats:
    """One self-critical update over a batch of (record, features) images.

    Per image and flow, N sampled captions are scored (right-to-left samples
    un-reversed first) and re-scored teacher-forced; the gradient is
    -sum_n advantage_n * grad log p(sample_n) over both flows, averaged over
    N and the batch. Sampling and re-scoring both run without dropout so the
    scored distribution is the sampling distribution."""
    if n_samples < 2:
        raise ContractError("scst_step needs n_samples >= 2")
    specials = vocab.specials
    mcfg = params.config
    rows, adv_f_rows, adv_b_rows, feat_rows = [], [], [], []
    rewards_f, rewards_b = [], []
    n_empty = 0
    for record, features in batch:
        sample_pairs = sample_captions(params, features, n_samples, rng, specials)
        refs = [list(c) for c in record.captions]
        cand_f, cand_b = [], []
        for sf, sb in sample_pairs:
            f_content = strip_specials(sf.tokens, specials)
            b_content = list(reversed(strip_specials(sb.tokens, specials)))
            n_empty += (len(f_content) == 0) + (len(b_content) == 0)
            cand_f.append(vocab.decode(f_content))
            cand_b.append(vocab.decode(b_content))
        _, r_f = cider(cand_f, [refs] * n_samples, reward_variant, df=df)
        _, r_b = cider(cand_b, [refs] * n_samples, reward_variant, df=df)
        rewards_f.append(r_f.mean())
        rewards_b.append(r_b.mean())
        adv_f = average_of_rest_advantages(r_f)
        adv_b = average_of_rest_advantages(r_b)
        for i, (sf, sb) in enumerate(sample_pairs):
            rows.append(sample_pair_arrays(sf.tokens, sb.tokens, specials))
            adv_f_rows.append(adv_f[i])
            adv_b_rows.append(adv_b[i])
            feat_rows.append(features.features)

    length = max(r[0].shape[0] for r in rows)

    def stacked(i, fill):
        arr = np.full((len(rows), length), fill, dtype=np.int64)
        for j, r in enumerate(rows):
            arr[j, : r[i].shape[0]] = r[i]
        return arr

    fwd_in = stacked(0, specials.pad)
    fwd_tgt = stacked(1, TARGET_MASK)
    bwd_in = stacked(2, specials.pad)
    bwd_tgt = stacked(3, TARGET_MASK)
    w_f = np.repeat(np.asarray(adv_f_rows)[:, None], length, axis=1)
    w_b = np.repeat(np.asarray(adv_b_rows)[:, None], length, axis=1)
    ctx = encode(np.stack(feat_rows), params, mcfg, training=False)
    logits_f, logits_b = decode_train_batch(ctx, fwd_in, bwd_in, params, mcfg,
                                            training=False)
    nll_f = nx.log_softmax_nll(logits_f, fwd_tgt, ignore_index=TARGET_MASK,
                               weights=w_f, normalize=False)
    nll_b = nx.log_softmax_nll(logits_b, bwd_tgt, ignore_index=TARGET_MASK,
                               weights=w_b, normalize=False)
    loss = nx.scale(nx.add(nll_f, nll_b), 1.0 / (n_samples * len(batch)))
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise TrainingError(f"non-finite self-critical pseudo-loss {loss_val}")
    nx.backward(loss)
    grads = take_grads(params)
    clip_global_norm(grads, grad_clip)
    optimizer.step(grads, lr)
    return ScstStats(loss_val, float(np.mean(rewards_f)), float(np.mean(rewards_b)),
                     n_empty)


def train_sc(params: ParameterSet, train_split, val_split, vocab: Vocabulary,
             tcfg: TrainConfig, seed: int, run_dir: str | None = None) -> list[dict]:
    """Stage-2 self-critical training from an XE checkpoint's parameters.

    Logs per-epoch mean sampled reward per flow (so per-flow reward curves are
    observable) and validation scores; keeps sc_last/sc_best checkpoints."""
    tcfg.validate()
    mcfg = params.config
    df = build_document_frequency(
        [[list(c) for c in rec.captions] for rec in train_split.records])
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
    optimizer = Adam(params, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    start_epoch, best = 0, -math.inf
    state = _read_state(run_dir, "sc")
    if state is not None and state["next_epoch"] > 0:
        start_epoch = state["next_epoch"]
        best = state["best"]
        restored, _ = load_checkpoint(os.path.join(ckpt_dir, "sc_last.ckpt"))
        for name, t in params.named():
            t.data[...] = restored[name].data.astype(t.dtype)
        optimizer.load(os.path.join(ckpt_dir, "sc_last.optim"))
        optimizer.step_count = state["global_step"]

    n_images = len(train_split.records)
    history = []
    for epoch in range(start_epoch, tcfg.sc_epochs):
        idx = np.arange(n_images)
        if 0 < tcfg.sc_images_per_epoch < n_images:
            idx = stream_rng(seed, S_SUBSET, epoch).choice(
                n_images, size=tcfg.sc_images_per_epoch, replace=False)
        losses, rf, rb = [], [], []
        for bi, lo in enumerate(range(0, len(idx), tcfg.batch_size)):
            sel = idx[lo : lo + tcfg.batch_size]
            batch = [(train_split.records[i], train_split.features[i]) for i in sel]
            rng = stream_rng(seed, S_SAMPLE, epoch, bi)
            stats = scst_step(params, batch, vocab, df, optimizer, tcfg.sc_lr,
                              tcfg.n_samples, rng, tcfg.reward, tcfg.grad_clip)
            losses.append(stats.pseudo_loss)
            rf.append(stats.mean_reward_fwd)
            rb.append(stats.mean_reward_bwd)
        entry = {"stage": "sc", "epoch": epoch, "step": optimizer.step_count,
                 "loss": float(np.mean(losses)), "lr": tcfg.sc_lr,
                 "reward_fwd": float(np.mean(rf)), "reward_bwd": float(np.mean(rb))}
        entry.update(_validate(params, val_split, vocab, tcfg))
        history.append(entry)
        _log_line(run_dir, entry)
        if ckpt_dir is not None:
            save_checkpoint(params, mcfg, os.path.join(ckpt_dir, "sc_last.ckpt"))
            optimizer.save(os.path.join(ckpt_dir, "sc_last.optim"))
            if entry["val_cider_ensemble"] > best:
                best = entry["val_cider_ensemble"]
                save_checkpoint(params, mcfg, os.path.join(ckpt_dir, "sc_best.ckpt"))
            _write_state(run_dir, {"stage": "sc", "next_epoch": epoch + 1,
                                   "global_step": optimizer.step_count, "best": best})
    return history
