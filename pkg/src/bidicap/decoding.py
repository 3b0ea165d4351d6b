"""Inference: greedy and flow-split beam search, sentence-level selection
between the two flows, word-level multi-model ensembling, and corpus
evaluation.

Both flows decode step-synchronously. Emission budget: up to `max_steps`
tokens per flow; end-of-sequence finishes a hypothesis (the eos is appended
and its log-probability counted), and hypotheses still open at the budget
close without eos. A finished flow keeps feeding padding tokens so the other
flow's cross-flow context matches the teacher-forced view of the padded pair
(this also makes re-scoring a hypothesis with decode_train reproduce its
stored log-probability).

Beam policy per flow: a finished hypothesis keeps its lane (its cache stays
available as cross-flow context) but stops competing; the active width
shrinks by one for each finished hypothesis and freed slots are not refilled.
Active lanes are kept sorted by score, so cross-flow rank pairing reads lane
r of the other flow (clamped to its lane count when the widths differ).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import SpecialTokens, Vocabulary, strip_specials
from .errors import ConfigError
from .incremental import BWD, FWD, DecodeSession
from .metrics import bleu, cider
from .model import ModelConfig, ParameterSet, encode


@dataclass
class DecodeConfig:
    total_beam: int = 4
    max_steps: int | None = None  # emission budget; default model.max_len + 1
    length_norm: str = "none"  # "none" (raw log-prob) or "avg" (per-token)

    def validate(self) -> "DecodeConfig":
        if self.total_beam < 2 or self.total_beam % 2 != 0:
            raise ConfigError(
                f"total_beam must be even and >= 2 for two flows, got {self.total_beam}"
            )
        if self.length_norm not in ("none", "avg"):
            raise ConfigError(f"length_norm must be none or avg, got {self.length_norm!r}")
        return self

    def steps_for(self, config: ModelConfig) -> int:
        return self.max_steps if self.max_steps is not None else config.max_len + 1


@dataclass
class BeamHypothesis:
    flow: str
    tokens: list[int] = field(default_factory=list)  # includes eos when emitted
    logprob: float = 0.0
    finished: bool = False
    finished_with_eos: bool = False
    rank: int = 0

    def score(self, length_norm: str) -> float:
        if length_norm == "avg":
            return self.logprob / max(1, len(self.tokens))
        return self.logprob


def _log_probs(dist: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(dist)


def _as_model_list(models):
    return [models] if isinstance(models, ParameterSet) else list(models)


def encode_image(models, features) -> list[np.ndarray]:
    """Encode one image's region features once per ensemble member."""
    ctxs = []
    with nx.no_grad():
        for m in _as_model_list(models):
            ctxs.append(encode(features, m, m.config).data)
    return ctxs


def greedy_decode(models, features, config: DecodeConfig, specials: SpecialTokens
                  ) -> tuple[BeamHypothesis, BeamHypothesis]:
    """Argmax decoding of both flows in lockstep; returns one hypothesis per
    flow (backward tokens still in generated, i.e. reversed, order)."""
    models = _as_model_list(models)
    ctxs = encode_image(models, features)
    session = DecodeSession(models, ctxs, 1, 1)
    max_steps = config.steps_for(models[0].config)
    hyps = {FWD: BeamHypothesis(FWD), BWD: BeamHypothesis(BWD)}
    inputs = {FWD: specials.l2r, BWD: specials.r2l}
    for _ in range(max_steps):
        if hyps[FWD].finished and hyps[BWD].finished:
            break
        dist_f, dist_b = session.step([inputs[FWD]], [inputs[BWD]])
        for flow, dist in ((FWD, dist_f[0]), (BWD, dist_b[0])):
            hyp = hyps[flow]
            if hyp.finished:
                inputs[flow] = specials.pad
                continue
            tok = int(dist.argmax())
            hyp.tokens.append(tok)
            hyp.logprob += float(_log_probs(dist)[tok])
            if tok == specials.eos:
                hyp.finished = True
                hyp.finished_with_eos = True
                inputs[flow] = specials.pad
            else:
                inputs[flow] = tok
    for hyp in hyps.values():
        hyp.finished = True
    return hyps[FWD], hyps[BWD]


class _Lane:
    __slots__ = ("tokens", "logprob", "finished", "with_eos", "next_input")

    def __init__(self, tokens, logprob, finished, with_eos, next_input):
        self.tokens = tokens
        self.logprob = logprob
        self.finished = finished
        self.with_eos = with_eos
        self.next_input = next_input


def beam_search_bidir(models, features, config: DecodeConfig, specials: SpecialTokens
                      ) -> dict[str, list[BeamHypothesis]]:
    """Flow-split beam search: each flow runs its own beam of width
    total_beam/2, synchronized step by step. Returns per-flow hypotheses
    sorted by descending log-probability, ranks assigned."""
    config.validate()
    models = _as_model_list(models)
    ctxs = encode_image(models, features)
    width = config.total_beam // 2
    max_steps = config.steps_for(models[0].config)
    session = DecodeSession(models, ctxs, 1, 1)
    lanes = {
        FWD: [_Lane([], 0.0, False, False, specials.l2r)],
        BWD: [_Lane([], 0.0, False, False, specials.r2l)],
    }

    for _ in range(max_steps):
        if all(l.finished for l in lanes[FWD]) and all(l.finished for l in lanes[BWD]):
            break
        dist_f, dist_b = session.step(
            [l.next_input for l in lanes[FWD]], [l.next_input for l in lanes[BWD]]
        )
        for flow, dists in ((FWD, dist_f), (BWD, dist_b)):
            old = lanes[flow]
            active = [i for i, l in enumerate(old) if not l.finished]
            if not active:
                for l in old:
                    l.next_input = specials.pad
                continue
            budget = width - (len(old) - len(active))
            logs = _log_probs(dists[active])  # (A, V)
            base = np.array([old[i].logprob for i in active])[:, None]
            flat = (base + logs).ravel()
            n_keep = min(budget, flat.size)
            top = np.argpartition(-flat, n_keep - 1)[:n_keep]
            top = top[np.argsort(-flat[top], kind="stable")]
            v = dists.shape[1]

            new_lanes: list[_Lane] = []
            parents: list[int] = []
            for idx in top:
                parent = active[idx // v]
                tok = int(idx % v)
                src = old[parent]
                done = tok == specials.eos
                new_lanes.append(
                    _Lane(src.tokens + [tok], float(flat[idx]), done, done,
                          specials.pad if done else tok)
                )
                parents.append(parent)
            for i, l in enumerate(old):
                if l.finished:
                    l.next_input = specials.pad
                    new_lanes.append(l)
                    parents.append(i)
            session.reorder(flow, parents)
            lanes[flow] = new_lanes

    out: dict[str, list[BeamHypothesis]] = {}
    for flow in (FWD, BWD):
        hyps = [
            BeamHypothesis(flow, l.tokens, l.logprob, True, l.with_eos)
            for l in lanes[flow]
        ]
        hyps.sort(key=lambda h: -h.logprob)
        for r, h in enumerate(hyps):
            h.rank = r
        out[flow] = hyps
    return out


@dataclass
class EnsembleChoice:
    """Sentence-level selection between the best hypotheses of the two flows."""

    tokens: list[int]  # forward word order, specials stripped
    flow: str  # "l2r" or "r2l"
    fwd_score: float
    bwd_score: float
    fwd_tokens: list[int] = field(default_factory=list)
    bwd_tokens: list[int] = field(default_factory=list)  # already un-reversed


def unreverse(tokens, specials: SpecialTokens) -> list[int]:
    """Backward-flow content back into forward word order."""
    return list(reversed(strip_specials(tokens, specials)))


def sentence_level_ensemble(fwd_best: BeamHypothesis, bwd_best: BeamHypothesis,
                            config: DecodeConfig, specials: SpecialTokens
                            ) -> EnsembleChoice:
    """Pick the flow whose hypothesis scores higher (per config.length_norm);
    ties go to the left-to-right flow."""
    fwd_score = fwd_best.score(config.length_norm)
    bwd_score = bwd_best.score(config.length_norm)
    fwd_tokens = strip_specials(fwd_best.tokens, specials)
    bwd_tokens = unreverse(bwd_best.tokens, specials)
    if fwd_score >= bwd_score:
        chosen, flow = fwd_tokens, "l2r"
    else:
        chosen, flow = bwd_tokens, "r2l"
    return EnsembleChoice(list(chosen), flow, fwd_score, bwd_score,
                          list(fwd_tokens), list(bwd_tokens))


def decode_image(models, features, config: DecodeConfig, specials: SpecialTokens,
                 method: str = "beam") -> EnsembleChoice:
    """Decode one image end to end (beam or greedy) and select the output."""
    if method == "greedy":
        fwd, bwd = greedy_decode(models, features, config, specials)
    elif method == "beam":
        hyps = beam_search_bidir(models, features, config, specials)
        fwd, bwd = hyps[FWD][0], hyps[BWD][0]
    else:
        raise ConfigError(f"unknown decode method {method!r}")
    return sentence_level_ensemble(fwd, bwd, config, specials)


def word_level_ensemble_decode(models, features, config: DecodeConfig,
                               specials: SpecialTokens, method: str = "beam"
                               ) -> EnsembleChoice:
    """Decode with the next-token distributions averaged over M models at
    every step, then the usual sentence-level selection. With M=1 this is
    exactly single-model decoding."""
    return decode_image(_as_model_list(models), features, config, specials, method)


def evaluate(models, split, config: DecodeConfig, vocab: Vocabulary,
             method: str = "beam") -> tuple[dict, list[dict]]:
    """Decode a dataset split and report BLEU-1..4 and the consensus score for
    the left-to-right flow alone, the right-to-left flow alone, and the
    sentence-level ensemble."""
    specials = vocab.specials
    references = []
    variants = {"l2r": [], "r2l": [], "ensemble": []}
    records = []
    for record, features in split:
        choice = decode_image(models, features, config, specials, method)
        references.append([list(c) for c in record.captions])
        fwd_words = vocab.decode(choice.fwd_tokens)
        bwd_words = vocab.decode(choice.bwd_tokens)
        chosen_words = vocab.decode(choice.tokens)
        variants["l2r"].append(fwd_words)
        variants["r2l"].append(bwd_words)
        variants["ensemble"].append(chosen_words)
        records.append({
            "image_id": record.image_id,
            "caption": " ".join(chosen_words),
            "flow": choice.flow,
            "fwd_score": choice.fwd_score,
            "bwd_score": choice.bwd_score,
            "fwd_caption": " ".join(fwd_words),
            "bwd_caption": " ".join(bwd_words),
        })
    report = {}
    for name, candidates in variants.items():
        corpus_cider, _ = cider(candidates, references)
        report[name] = {"cider": corpus_cider, "bleu": bleu(candidates, references)}
    return report, records


def write_decode_records(records, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def read_decode_records(path: str) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out
