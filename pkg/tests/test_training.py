import math

import numpy as np
import pytest

import bidicap.numerics as nx
from bidicap.data import SpecialTokens, SynthSpec, Vocabulary, build_vocab, pair_from_ids, synth_corpus
from bidicap.errors import ConfigError, ContractError
from bidicap.metrics import build_document_frequency
from bidicap.model import ParameterSet, decode_train, decode_train_batch, decode_unidirectional, encode
from bidicap.training import (
    TARGET_MASK,
    Adam,
    S_ENC,
    S_FWD,
    S_PAIR,
    S_SHUFFLE,
    TrainConfig,
    average_of_rest_advantages,
    clip_global_norm,
    joint_xe_loss,
    joint_xe_loss_batch,
    lr_schedule,
    sample_captions,
    sample_pair_arrays,
    scheduled_sampling_prob,
    scst_step,
    stack_pairs,
    stream_rng,
    take_grads,
    train_sc,
    train_xe,
)
from conftest import tiny_model

SP = SpecialTokens(0, 1, 2, 3, 4)


def rescore_logp(logits, targets, mask_id=-1):
    """Sequence log-probability of `targets` under `logits`, skipping
    alignment-mask positions."""
    m = logits.max(axis=-1, keepdims=True)
    lsm = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    keep = targets != mask_id
    idx = np.where(keep, targets, 0)
    return float(lsm[np.arange(len(targets)), idx][keep].sum())


def stack_sample_rows(samples):
    rows = [sample_pair_arrays(sf.tokens, sb.tokens, SP) for sf, sb in samples]
    length = max(r[0].shape[0] for r in rows)

    def stacked(i, fill):
        arr = np.full((len(rows), length), fill, dtype=np.int64)
        for j, r in enumerate(rows):
            arr[j, : r[i].shape[0]] = r[i]
        return arr

    return stacked(0, SP.pad), stacked(1, TARGET_MASK), \
        stacked(2, SP.pad), stacked(3, TARGET_MASK)


class TestJointXeLoss:
    def test_uniform_logits_give_log_vocab(self):
        v = 10
        pair = pair_from_ids([5, 6, 7, 8], [5, 6, 7, 8], SP)
        # 4 content + eos = 5 non-pad targets per flow; uniform logits
        logits = nx.Tensor(np.zeros((5, v), dtype=np.float64))
        loss = joint_xe_loss(logits, logits, pair)
        assert abs(loss.item() - math.log(v)) < 1e-12

    def test_perfect_logits_drive_loss_to_zero(self):
        pair = pair_from_ids([5, 6], [7, 8], SP)
        losses = []
        for margin in (5.0, 20.0, 80.0):
            lf = np.zeros((3, 10))
            lb = np.zeros((3, 10))
            for t in range(3):
                lf[t, pair.fwd_target[t]] = margin
                lb[t, pair.bwd_target[t]] = margin
            losses.append(joint_xe_loss(nx.Tensor(lf * 1.0), nx.Tensor(lb * 1.0), pair).item())
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-12

    def test_hand_summed_tiny_batch(self, rng):
        pair = pair_from_ids([5, 6, 7], [8, 9], SP)
        lf = rng.normal(size=(4, 10))
        lb = rng.normal(size=(4, 10))

        def logp(row, t):
            return row[t] - np.log(np.exp(row).sum())

        total, count = 0.0, 0
        for t in range(4):
            if pair.fwd_target[t] != SP.pad:
                total -= logp(lf[t], pair.fwd_target[t])
                count += 1
            if pair.bwd_target[t] != SP.pad:
                total -= logp(lb[t], pair.bwd_target[t])
                count += 1
        loss = joint_xe_loss(nx.Tensor(lf), nx.Tensor(lb), pair)
        assert abs(loss.item() - total / count) < 1e-10

    def test_sum_mode_decomposes_into_per_flow_losses(self, rng):
        pair = pair_from_ids([5, 6, 7], [8, 9], SP)
        lf = nx.Tensor(rng.normal(size=(4, 10)))
        lb = nx.Tensor(rng.normal(size=(4, 10)))
        joint = joint_xe_loss(lf, lb, pair, normalize=False).item()
        only_f = nx.log_softmax_nll(lf, pair.fwd_target, SP.pad, normalize=False).item()
        only_b = nx.log_softmax_nll(lb, pair.bwd_target, SP.pad, normalize=False).item()
        assert abs(joint - (only_f + only_b)) < 1e-6


class TestSchedules:
    def test_lr_monotone_up_then_down(self):
        warm, base = 50, 1e-3
        values = [lr_schedule(s, warm, base) for s in range(1, 200)]
        peak = warm - 1  # 0-indexed into values
        assert all(values[i] < values[i + 1] for i in range(peak))
        assert all(values[i] > values[i + 1] for i in range(peak, len(values) - 1))

    def test_branches_agree_at_warmup(self):
        warm, base = 100, 5e-4
        up = base * (warm * warm ** -1.5) * math.sqrt(warm)
        down = base * (warm ** -0.5) * math.sqrt(warm)
        assert abs(up - down) < 1e-18
        assert abs(lr_schedule(warm, warm, base) - base) < 1e-12

    def test_spot_values_against_formula(self):
        for step, warm, base in ((7, 40, 2e-4), (1000, 40, 2e-4), (40, 40, 2e-4)):
            expected = base * min(step ** -0.5, step * warm ** -1.5) * math.sqrt(warm)
            assert lr_schedule(step, warm, base) == pytest.approx(expected, rel=1e-12)

    def test_step_zero_rejected(self):
        with pytest.raises(ContractError):
            lr_schedule(0, 10, 1e-3)

    def test_scheduled_sampling_prob_table(self):
        assert scheduled_sampling_prob(0) == 0.0
        assert scheduled_sampling_prob(5) == pytest.approx(0.05)
        assert scheduled_sampling_prob(14) == pytest.approx(0.10)
        assert scheduled_sampling_prob(1000) == pytest.approx(0.25)  # clamped


class TestAdvantages:
    def test_constant_rewards_give_exact_zero(self):
        for r in (0.0, 1.7, 3.3333331, 123456.789):
            adv = average_of_rest_advantages([r] * 5)
            assert (adv == 0.0).all()

    def test_two_samples_exactly_antisymmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r = rng.normal(size=2) * rng.uniform(0.1, 100)
            adv = average_of_rest_advantages(r)
            assert adv[0] == (r[0] - r[1]) and adv[1] == (r[1] - r[0])
            assert adv[0] == -adv[1]

    def test_advantages_sum_to_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            adv = average_of_rest_advantages(rng.normal(size=n) * 10)
            assert abs(adv.sum()) < 1e-9

    def test_matches_definition(self):
        r = np.array([1.0, 2.0, 4.0, 8.0])
        adv = average_of_rest_advantages(r)
        for i in range(4):
            rest = np.delete(r, i).mean()
            assert adv[i] == pytest.approx(r[i] - rest, rel=1e-12)

    def test_single_sample_rejected(self):
        with pytest.raises(ContractError):
            average_of_rest_advantages([1.0])


class TestSampling:
    def test_temperature_zero_equals_greedy(self, rng):
        from bidicap.decoding import DecodeConfig, greedy_decode

        params, cfg = tiny_model(lam=0.2, n_layers=1)
        feats = rng.normal(size=(2, cfg.feature_dim))
        samples = sample_captions(params, feats, 2, np.random.default_rng(0), SP,
                                  temperature=0.0)
        fwd_hyp, bwd_hyp = greedy_decode(params, feats, DecodeConfig(), SP)
        for sf, sb in samples:
            assert sf.tokens == fwd_hyp.tokens
            assert sb.tokens == bwd_hyp.tokens

    def test_high_entropy_model_yields_distinct_samples(self):
        distinct = 0
        for seed in range(100):
            params, cfg = tiny_model(seed=seed, n_layers=1, lam=0.0)
            feats = np.random.default_rng(seed).normal(size=(2, cfg.feature_dim))
            samples = sample_captions(params, feats, 5,
                                      np.random.default_rng(seed + 999), SP)
            seqs = {tuple(sf.tokens) for sf, _ in samples}
            distinct += len(seqs) == 5
        assert distinct >= 90

    @pytest.mark.parametrize("lam", [0.0, 0.3])
    def test_sample_logprob_matches_teacher_forced_rescoring(self, rng, lam):
        params, cfg = tiny_model(lam=lam, n_layers=2)
        feats = rng.normal(size=(3, cfg.feature_dim))
        samples = sample_captions(params, feats, 3, np.random.default_rng(5), SP)
        with nx.no_grad():
            ctx = encode(feats, params, cfg)
            ctx_b = nx.reshape(ctx, (1, *ctx.shape))
        for sf, sb in samples:
            fi, ft, bi, bt = sample_pair_arrays(sf.tokens, sb.tokens, SP)
            with nx.no_grad():
                lf, lb = decode_train_batch(ctx_b, fi[None], bi[None], params, cfg)
            assert abs(rescore_logp(lf.data[0], ft) - sf.logprob) < 1e-5
            assert abs(rescore_logp(lb.data[0], bt) - sb.logprob) < 1e-5


def corpus_and_vocab(n_train=8, seed=0, **kw):
    spec = SynthSpec(n_train=n_train, n_val=3, n_test=3, feature_dim=12,
                     n_regions=4, seed=seed, **kw)
    splits = synth_corpus(spec)
    vocab = build_vocab((list(c) for r in splits["train"].records for c in r.captions),
                        min_count=1)
    return splits, vocab, spec


def model_for(vocab, spec, lam=0.1, seed=0, **kw):
    from conftest import tiny_config

    cfg = tiny_config(vocab_size=len(vocab), feature_dim=spec.feature_dim,
                      d_model=16, d_k=8, d_v=8, d_ff=32, n_heads=2, lam=lam,
                      max_len=16, **kw)
    params = ParameterSet.initialize(cfg, np.random.default_rng(seed),
                                     dtype=np.float32)
    return params, cfg


class TestScst:
    def test_constant_rewards_produce_zero_update(self, monkeypatch):
        splits, vocab, spec = corpus_and_vocab()
        params, cfg = model_for(vocab, spec)
        before = {k: v.data.copy() for k, v in params.named()}
        df = build_document_frequency(
            [[list(c) for c in r.captions] for r in splits["train"].records])
        import bidicap.training as tr

        monkeypatch.setattr(tr, "cider",
                            lambda cands, refs, variant, df=None:
                            (3.7, np.full(len(cands), 3.7)))
        optimizer = Adam(params)
        batch = list(splits["train"])[:2]
        stats = tr.scst_step(params, batch, vocab, df, optimizer, 1e-3, 5,
                             np.random.default_rng(0))
        assert stats.pseudo_loss == 0.0
        for k, v in params.named():
            assert np.array_equal(before[k], v.data), k

    def test_policy_gradient_sign_on_output_bias(self):
        """Reward 1 when the first forward token is a chosen id, else 0. The
        accumulated pseudo-loss gradient on that id's output bias must be
        negative (a descent step raises its probability)."""
        splits, vocab, spec = corpus_and_vocab()
        params, cfg = model_for(vocab, spec, lam=0.0)
        rng = np.random.default_rng(0)
        pilot = sample_captions(params, splits["train"].features[0].features, 40,
                                rng, SP)
        firsts = [sf.tokens[0] for sf, _ in pilot if sf.tokens]
        target_tok = int(np.bincount(firsts).argmax())  # reachable but not certain
        grad_acc = 0.0
        n_trials = 0
        for trial in range(1000):
            feats = splits["train"].features[trial % 8]
            samples = sample_captions(params, feats.features, 4, rng, SP)
            rewards = np.array([1.0 if (sf.tokens and sf.tokens[0] == target_tok)
                                else 0.0 for sf, _ in samples])
            if rewards.min() == rewards.max():
                continue  # zero advantage, no information
            n_trials += 1
            adv = average_of_rest_advantages(rewards)
            ctx = encode(feats.features, params, cfg)
            fi, ft, bi, bt = stack_sample_rows(samples)
            ctx_rep = nx.Tensor(np.repeat(ctx.data[None], len(samples), axis=0),
                                requires_grad=False)
            lf, _ = decode_train_batch(ctx_rep, fi, bi, params, cfg)
            w = np.repeat(adv[:, None], fi.shape[1], axis=1)
            loss = nx.scale(nx.log_softmax_nll(lf, ft, TARGET_MASK, weights=w,
                                               normalize=False), 1.0 / 4)
            nx.backward(loss)
            grads = take_grads(params)
            grad_acc += grads["out_proj.b"][target_tok]
            if n_trials >= 200:
                break
        assert n_trials >= 100
        assert grad_acc < 0

    def test_reward_independent_of_sample_gives_shrinking_mean_gradient(self):
        splits, vocab, spec = corpus_and_vocab()
        params, cfg = model_for(vocab, spec, lam=0.0)
        rng = np.random.default_rng(7)

        def mean_grad_norm(n_trials):
            acc = None
            for _ in range(n_trials):
                feats = splits["train"].features[int(rng.integers(8))]
                samples = sample_captions(params, feats.features, 3, rng, SP)
                rewards = rng.normal(size=3)  # independent of the samples
                adv = average_of_rest_advantages(rewards)
                ctx = encode(feats.features, params, cfg)
                fi, ft, bi, bt = stack_sample_rows(samples)
                rep = nx.Tensor(np.repeat(ctx.data[None], 3, axis=0))
                lf, lb = decode_train_batch(rep, fi, bi, params, cfg)
                w = np.repeat(adv[:, None], fi.shape[1], axis=1)
                loss = nx.scale(
                    nx.add(nx.log_softmax_nll(lf, ft, TARGET_MASK, weights=w, normalize=False),
                           nx.log_softmax_nll(lb, bt, TARGET_MASK, weights=w, normalize=False)),
                    1.0 / 3)
                nx.backward(loss)
                grads = take_grads(params)
                flat = np.concatenate([g.ravel().astype(np.float64)
                                       for g in grads.values()])
                acc = flat if acc is None else acc + flat
            return float(np.linalg.norm(acc / n_trials))

        small, large = mean_grad_norm(40), mean_grad_norm(160)
        assert large < small  # ~1/sqrt(trials) shrinkage

    def test_scst_step_runs_and_reports(self):
        splits, vocab, spec = corpus_and_vocab()
        params, cfg = model_for(vocab, spec, lam=0.1)
        df = build_document_frequency(
            [[list(c) for c in r.captions] for r in splits["train"].records])
        optimizer = Adam(params)
        stats = scst_step(params, list(splits["train"])[:3], vocab, df, optimizer,
                          1e-4, 3, np.random.default_rng(0))
        assert math.isfinite(stats.pseudo_loss)
        assert stats.mean_reward_fwd >= 0 and stats.mean_reward_bwd >= 0


class TestTrainXe:
    def test_runs_and_is_reproducible(self, tmp_path):
        splits, vocab, spec = corpus_and_vocab()
        tcfg = TrainConfig(batch_size=4, xe_epochs=2, warmup_steps=10, base_lr=1e-3)
        histories = []
        for _ in range(2):
            params, cfg = model_for(vocab, spec)
            h = train_xe(params, splits["train"], splits["val"], vocab, tcfg, seed=0)
            histories.append(h)
        assert histories[0] == histories[1]

    def test_single_flow_requires_lam_zero(self):
        splits, vocab, spec = corpus_and_vocab()
        params, cfg = model_for(vocab, spec, lam=0.1)
        tcfg = TrainConfig(batch_size=4, xe_epochs=1)
        with pytest.raises(ConfigError):
            train_xe(params, splits["train"], splits["val"], vocab, tcfg, 0,
                     flows="fwd")

    def test_forward_flow_decouples_from_backward_at_lam_zero(self):
        """Per-step equality between (a) the unidirectional trainer and (b) a
        manual loop running the full two-flow pass but training on the forward
        loss only. Dropout active; streams are per-flow."""
        splits, vocab, spec = corpus_and_vocab()
        seed = 0
        tcfg = TrainConfig(batch_size=4, xe_epochs=1, warmup_steps=10,
                           base_lr=1e-3)
        from bidicap.data import make_pairs
        from bidicap.training import _stack_features

        # (a) unidirectional trainer
        params_a, cfg_a = model_for(vocab, spec, lam=0.0, p_dropout=0.2)
        hist = train_xe(params_a, splits["train"], splits["val"], vocab, tcfg,
                        seed=seed, flows="fwd")

        # (b) manual joint-pass loop, forward loss only
        params_b, cfg_b = model_for(vocab, spec, lam=0.0, p_dropout=0.2)
        optimizer = Adam(params_b, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
        pair_rng = stream_rng(seed, S_PAIR, 0)
        pairs, image_idx = [], []
        for i, record in enumerate(splits["train"].records):
            for p in make_pairs(record, vocab, pair_rng, cfg_b.max_len):
                pairs.append(p)
                image_idx.append(i)
        order = stream_rng(seed, S_SHUFFLE, 0).permutation(len(pairs))
        losses = []
        step = 0
        for bi, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            sel = order[lo : lo + tcfg.batch_size]
            batch_pairs = [pairs[i] for i in sel]
            feats = _stack_features(splits["train"], [image_idx[i] for i in sel])
            fi, ft, bi_, bt = stack_pairs(batch_pairs, SP.pad)
            step += 1
            lr = lr_schedule(step, tcfg.warmup_steps, tcfg.base_lr)
            ctx = encode(feats, params_b, cfg_b, training=True,
                         rng=stream_rng(seed, S_ENC, 0, bi))
            lf, lb = decode_train_batch(ctx, fi, bi_, params_b, cfg_b, True,
                                        stream_rng(seed, S_FWD, 0, bi),
                                        stream_rng(seed, 4, 0, bi))
            loss = nx.log_softmax_nll(lf, ft, SP.pad)
            losses.append(loss.item())
            nx.backward(loss)
            grads = take_grads(params_b)
            clip_global_norm(grads, tcfg.grad_clip)
            optimizer.step(grads, lr)
        assert abs(np.mean(losses) - hist[0]["loss"]) == 0.0
        for k, t in params_a.named():
            assert np.array_equal(t.data, params_b[k].data), k

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        splits, vocab, spec = corpus_and_vocab()
        tcfg = TrainConfig(batch_size=4, xe_epochs=3, warmup_steps=10, base_lr=1e-3)

        params_full, _ = model_for(vocab, spec)
        full_dir = str(tmp_path / "full")
        import os

        os.makedirs(full_dir)
        h_full = train_xe(params_full, splits["train"], splits["val"], vocab,
                          tcfg, 0, run_dir=full_dir)

        # interrupted: run only 1 epoch, then resume to 3
        part_dir = str(tmp_path / "part")
        os.makedirs(part_dir)
        params_part, _ = model_for(vocab, spec)
        tcfg1 = TrainConfig(batch_size=4, xe_epochs=1, warmup_steps=10, base_lr=1e-3)
        train_xe(params_part, splits["train"], splits["val"], vocab, tcfg1, 0,
                 run_dir=part_dir)
        params_resume, _ = model_for(vocab, spec)
        h_resumed = train_xe(params_resume, splits["train"], splits["val"], vocab,
                             tcfg, 0, run_dir=part_dir)
        assert h_resumed == h_full[1:]
        for k, t in params_full.named():
            assert np.array_equal(t.data, params_resume[k].data), k


class TestTrainSc:
    def test_runs_and_logs_per_flow_rewards(self):
        splits, vocab, spec = corpus_and_vocab()
        params, cfg = model_for(vocab, spec)
        tcfg = TrainConfig(batch_size=4, sc_epochs=2, sc_lr=1e-4, n_samples=3)
        history = train_sc(params, splits["train"], splits["val"], vocab, tcfg, 0)
        assert len(history) == 2
        for entry in history:
            assert "reward_fwd" in entry and "reward_bwd" in entry
            assert math.isfinite(entry["loss"])
