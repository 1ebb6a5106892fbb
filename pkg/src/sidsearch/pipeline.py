"""End-to-end experiment runs: corpus, codebooks, staged training, RL and evaluation.

Every artifact lives under one run directory and is skipped when already
present, so an interrupted run resumes where it stopped. All randomness is
derived from the config seed; report files contain no timestamps.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .codec import fit_codebooks, load_codebooks, save_codebooks, usage_metrics
from .config import ExperimentConfig, write_config
from .corpus import generate_world, load_corpus, simulate_logs, write_corpus
from .data import DEFAULT_MIXTURES, SearchData, StageSpec, sample_batch
from .decoding import beam_search, greedy_tokens
from .distill import DistillConfig, Trainer
from .metrics import SliceResult, hr_mrr, item_hr, valid_sid_rate
from .model import ModelConfig, Params, init_params, load_checkpoint, save_checkpoint
from .reward import RewardContext, group_rewards
from .rl import rl_run
from .rng import generator
from .vocab import Prompt

STAGES = ("corpus", "sid", "sft", "distill", "rl", "eval")

LADDER = (("untrained", "init"), ("baseline", "s3_base"), ("+ CoT tasks", "s3_cot"),
          ("+ self-distill", "s3_sd"), ("+ GRPO", "rl_grpo"), ("+ TPMA", "rl_tpma"))
HEADTAIL = (("baseline", "s3_base", "student"), ("+ CoT tasks", "s3_cot", "student"),
            ("+ direct CoT", "s3_direct", "direct"), ("+ RAG", "s3_rag", "teacher"))
REQUIRED = {"ladder": ("s3_base",), "headtail": ("s3_base",), "sides": ("s3_cot", "s3_rag", "s3_sd"),
            "modes": ("s3_sd",)}
SIDES = (("Base (S)", "s3_cot", "student"), ("Base (T)", "s3_rag", "teacher"),
         ("Self-Distill (T)", "s3_sd", "teacher"), ("Self-Distill (S)", "s3_sd", "student"))


def mode_run(mode: str) -> str:
    return "s3_sd" if mode == "self" else "s3_sd_" + mode.replace("+", "_")


def parse_mode(mode: str, base: DistillConfig) -> DistillConfig:
    """``codi_l1`` optionally suffixed with ``+proj`` and ``+sd`` (logit KL on top)."""
    name, *opts = mode.split("+")
    unknown = set(opts) - {"proj", "sd"}
    if unknown or (opts and name != "codi_l1"):
        raise ValueError(f"unknown mode variant {mode!r}")
    return replace(base, mode=name, codi_proj="proj" in opts, codi_kl="sd" in opts)


class Run:
    def __init__(self, cfg: ExperimentConfig, out, corpus_dir=None, checkpoint_dir=None, trace: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(out)
        self.corpus_dir = Path(corpus_dir) if corpus_dir else self.out / "corpus"
        self.ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else self.out / "checkpoints"
        self.reports = self.out / "reports"
        self.trace = trace
        self._data: SearchData | None = None
        self._preds: dict = {}
        for d in (self.out, self.ckpt_dir, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        write_config(cfg, self.out / "config.json")

    # -- logging
    def log(self, msg: str) -> None:
        with open(self.out / "run.log", "a") as fh:
            fh.write(msg + "\n")

    def _timed(self, label, fn, *a, **k):
        t = time.perf_counter()
        out = fn(*a, **k)
        self.log(f"{label}: {time.perf_counter() - t:.1f}s")
        return out

    # -- corpus and codebooks
    def gen_corpus(self) -> None:
        if (self.corpus_dir / "meta.json").exists():
            return
        world = generate_world(self.cfg.world, self.cfg.seed)
        logs = simulate_logs(world, seed=self.cfg.seed)
        write_corpus(world, logs, self.corpus_dir)

    def train_sid(self) -> None:
        path = self.out / "codebooks.json"
        if path.exists():
            return
        world, _ = load_corpus(self.corpus_dir)
        emb = np.array([it.embedding for it in world.items])
        c = self.cfg.codec
        cb = fit_codebooks(emb, c.L, c.K, c.iters, self.cfg.seed)
        codes = cb.encode_batch(emb)
        save_codebooks(path, cb, [(i, tuple(int(x) for x in row)) for i, row in enumerate(codes)])
        cur, icr = usage_metrics(cb, codes)
        recon = []
        for l in range(1, cb.L + 1):
            sub = type(cb)(cb.levels[:l])
            recon.append(sub.reconstruction_error(emb))
        _write_json(self.reports / "codec.json", {"CUR": cur, "ICR": icr, "reconstruction_error_by_L": recon,
                                                  "collisions": int(len(codes) - len({tuple(r) for r in codes.tolist()}))})

    @property
    def codebooks_path(self) -> Path:
        own = self.out / "codebooks.json"
        if own.exists() or self.ckpt_dir == self.out / "checkpoints":
            return own
        return self.ckpt_dir.parent / "codebooks.json"

    @property
    def data(self) -> SearchData:
        if self._data is None:
            world, logs = load_corpus(self.corpus_dir)
            cb, catalog = load_codebooks(self.codebooks_path)
            self._data = SearchData(world, logs, cb, catalog)
        return self._data

    def model_config(self) -> ModelConfig:
        m = self.cfg.model
        return ModelConfig(vocab_size=len(self.data.vocab), d_model=m.d_model, n_heads=m.n_heads,
                           n_layers=m.n_layers, d_ff=m.d_ff, max_len=m.max_len,
                           item_dim=self.data.world.config.dim, dropout=m.dropout, tied=m.tied)

    # -- checkpoints
    def ckpt_path(self, name: str) -> Path:
        return self.ckpt_dir / f"{name}.json"

    def has(self, name: str) -> bool:
        return name == "init" or self.ckpt_path(name).exists()

    def load(self, name: str) -> tuple[Params, dict]:
        if name == "init":
            return init_params(self.model_config(), self.cfg.seed), {"prompt": {}}
        params, _, meta = load_checkpoint(self.ckpt_path(name))
        return params, meta

    def _save(self, name, params, meta):
        save_checkpoint(self.ckpt_path(name), params, self.model_config(), meta)

    # -- supervised stages
    def _trainer(self, params, dcfg=None, name=""):
        t = self.cfg.train
        return Trainer(params, self.model_config(), self.data.vocab, dcfg or self.cfg.distill, lr=t.lr,
                       momentum=t.momentum, clip_norm=t.clip_norm, seed=self.cfg.seed,
                       metrics_path=self.out / "metrics.jsonl", tag={"run": name})

    def stage12(self, stage: int, cot: bool) -> str:
        name = f"s{stage}_{'cot' if cot else 'base'}"
        if self.has(name):
            return name
        t = self.cfg.train
        parent = "init" if stage == 1 else f"s1_{'cot' if cot else 'base'}"
        if stage == 2:
            self.stage12(1, cot)
        params, _ = self.load(parent)
        spec = StageSpec(stage, dict(DEFAULT_MIXTURES[stage]))
        steps = t.stage1_steps if stage == 1 else t.stage2_steps
        if stage == 1 and cot:
            # keep the non-CoT tasks' absolute number of updates unchanged
            spec = spec.with_cot(t.cot_mass)
            steps = int(round(steps / (1.0 - t.cot_mass)))
        spec.validate()
        pools = self.data.pools(stage, cot=cot)
        tr = self._trainer(params, name=name)
        for s in range(steps):
            tr.ce_step(sample_batch(pools, spec, t.batch_size, generator(self.cfg.seed, "batch", stage, s)),
                       focal=t.stage_focal)
        self._save(name, tr.params, {"prompt": {}, "stage": stage, "cot": cot, "steps": steps})
        return name

    def stage3(self, kind: str) -> str:
        """kind: base | cot | rag | direct | sd | sd_<mode>."""
        name = "s3_" + kind
        if self.has(name):
            return name
        parent = self.stage12(2, kind != "base")
        params, _ = self.load(parent)
        t = self.cfg.train
        data = self.data
        prompt_meta: dict = {}
        if kind in ("base", "cot"):
            pools, plain = data.pools(3), True
        elif kind == "rag":
            pools, plain = data.pools(3, keywords_in_input=True), True
            prompt_meta = {"keywords": True}
        elif kind == "direct":
            pools, plain = data.pools(3, direct_cot=True), True
            prompt_meta = {"direct": True}
        else:
            mode = "self" if kind == "sd" else kind[3:]
            dcfg = parse_mode(_mode_from_run(mode), self.cfg.distill)
            pools, plain = data.pools(3, mode=dcfg.mode), False
            prompt_meta = {"distill_token": dcfg.mode in ("special_token", "codi_l1"),
                           "teacher_distill_token": dcfg.mode == "codi_l1"}
        spec = StageSpec(3, dict(DEFAULT_MIXTURES[3]))
        tr = self._trainer(params, None if plain else dcfg, name=name)
        for s in range(t.stage3_steps):
            batch = sample_batch(pools, spec, t.batch_size, generator(self.cfg.seed, "batch", 3, s))
            if plain:
                tr.ce_step(batch, focal=False)
            else:
                tr.sdft_step(batch)
        self._save(name, tr.params, {"prompt": prompt_meta, "stage": 3, "kind": kind})
        return name

    def rl(self, algo: str) -> str:
        name = f"rl_{algo}"
        if self.has(name):
            return name
        parent = self.stage3("sd")
        params, meta = self.load(parent)
        rcfg = replace(self.cfg.rl, algo=algo)
        trace = self.out / f"trace_{algo}.jsonl" if self.trace else None
        rl_run(params, self.model_config(), self.data, rcfg, self.cfg.reward, self.cfg.seed,
               metrics_path=self.out / "metrics.jsonl", trace_path=trace)
        self._save(name, params, {**meta, "rl": algo})
        return name

    # -- evaluation
    def prompts(self, meta: dict, side: str, pvs) -> list[Prompt]:
        pm = meta.get("prompt", {})
        if side == "teacher" or pm.get("keywords"):
            dt = pm.get("teacher_distill_token", False)
            return [self.data.prompt(pv, keywords=True, distill_token=dt) for pv in pvs]
        return [self.data.prompt(pv, distill_token=pm.get("distill_token", False)) for pv in pvs]

    def predictions(self, name: str, side: str = "student", constrained: bool = True):
        key = (name, side, constrained)
        if key in self._preds:
            return self._preds[key]
        params, meta = self.load(name)
        data, cfg = self.data, self.model_config()
        pvs = data.test_pvs
        if side == "direct":
            base = [data.prompt(pv, task="direct_cot") for pv in pvs]
            v = data.vocab
            kws = greedy_tokens(params, cfg, v, base, np.arange(v.word_base, v.user_base), v.sep, 8)
            prompts = [Prompt(p.tokens + k + [v.sep], p.long_emb) for p, k in zip(base, kws)]
        else:
            prompts = self.prompts(meta, side, pvs)
        res = beam_search(params, cfg, data.vocab, prompts, data.trie, self.cfg.eval.beam, constrained=constrained)
        preds = [[sid for sid, _ in r] for r in res]
        self._preds[key] = preds
        return preds

    def score(self, model: str, name: str, side: str, slice_: str, constrained: bool = True) -> SliceResult:
        data = self.data
        n = self.cfg.eval.n
        preds = self.predictions(name, side, constrained)
        rows = []
        for pv, p in zip(data.test_pvs, preds):
            if slice_ in ("all", "click") or slice_ == pv.tier:
                rows.append((p, data.truth(pv, "click"), pv.clicked))
            elif slice_ == "order" and pv.ordered:
                rows.append((p, data.truth(pv, "order"), pv.ordered))
        P = [r[0] for r in rows]
        hr, mrr = hr_mrr(P, [r[1] for r in rows], n)
        return SliceResult(model, slice_, len(rows), hr, mrr, valid_sid_rate([p[:n] for p in P], data.trie),
                           item_hr(P, [set(r[2]) for r in rows], data.trie, n))

    def protocol(self, name: str) -> list[dict]:
        if name not in REQUIRED:
            raise ValueError(f"unknown protocol {name!r}")
        missing = [r for r in REQUIRED[name] if not self.has(r)]
        if missing:
            raise FileNotFoundError(f"protocol {name}: missing checkpoints {missing} in {self.ckpt_dir}")
        rows: list[dict] = []
        if name == "ladder":
            for label, run in LADDER:
                if not self.has(run):
                    continue
                for sl in ("click", "order"):
                    r = self.score(label, run, "student", sl).__dict__
                    r["valid_sid_rate_unconstrained"] = self.score(label, run, "student", sl, False).valid_sid_rate
                    rows.append(r)
            for r in rows:
                ref = {"+ CoT tasks": "baseline", "+ self-distill": "+ CoT tasks",
                       "+ GRPO": "+ self-distill", "+ TPMA": "+ self-distill"}.get(r["model"])
                refrow = next((x for x in rows if x["model"] == ref and x["slice"] == r["slice"]), None)
                r["delta_hr"] = r["hr"] - refrow["hr"] if refrow else None
                r["reference"] = ref if refrow else None
        elif name == "headtail":
            for label, run, side in HEADTAIL:
                if self.has(run):
                    for sl in ("head", "tail", "all"):
                        rows.append(self.score(label, run, side, sl).__dict__)
        elif name == "sides":
            for label, run, side in SIDES:
                if self.has(run):
                    for sl in ("click", "order"):
                        rows.append(self.score(label, run, side, sl).__dict__)
        elif name == "modes":
            for mode in self.cfg.eval.modes:
                run = mode_run(mode)
                if self.has(run):
                    for sl in ("click", "order"):
                        rows.append(self.score(mode, run, "student", sl).__dict__)
        return rows

    def rl_report(self) -> list[dict]:
        rows = []
        data = self.data
        for label, run in (("+ self-distill", "s3_sd"), ("+ GRPO", "rl_grpo"), ("+ TPMA", "rl_tpma")):
            if not self.has(run):
                continue
            preds = self.predictions(run, "student")
            total = 0.0
            for pv, p in zip(data.test_pvs, preds):
                if not p:
                    continue
                ctx = RewardContext(pv.user, pv.query, data.truth(pv, "click"), data.truth(pv, "order"))
                total += group_rewards([p[0]], ctx, data.world, data.trie, self.cfg.reward)[0].r_item
            rows.append({"model": label, "mean_top1_reward": total / len(preds), "n_pv": len(preds)})
        return rows

    def evaluate(self, protocols=None) -> list[str]:
        """Write reports for each protocol; returns invariant violations."""
        problems: list[str] = []
        for proto in protocols or self.cfg.eval.protocols:
            rows = self._timed(f"eval {proto}", self.protocol, proto)
            for r in rows:
                problems += SliceResult(**{k: r[k] for k in SliceResult.__dataclass_fields__}).check()
            _write_table(self.reports / proto, rows)
        if any(self.has(r) for r in ("rl_grpo", "rl_tpma")):
            _write_table(self.reports / "rl", self.rl_report())
        return problems

    # -- orchestration
    def full(self, skip=()) -> list[str]:
        skip = set(skip)
        bad = skip - set(STAGES)
        if bad:
            raise ValueError(f"unknown stages to skip: {sorted(bad)}")
        if "corpus" not in skip:
            self._timed("corpus", self.gen_corpus)
        if "sid" not in skip:
            self._timed("codebooks", self.train_sid)
        protos = self.cfg.eval.protocols
        if "sft" not in skip:
            for kind in ("base", "cot"):
                self._timed(f"s3_{kind}", self.stage3, kind)
            if "headtail" in protos or "sides" in protos:
                self._timed("s3_rag", self.stage3, "rag")
            if "headtail" in protos:
                self._timed("s3_direct", self.stage3, "direct")
        if "distill" not in skip:
            self._timed("s3_sd", self.stage3, "sd")
            if "modes" in protos:
                for mode in self.cfg.eval.modes:
                    if mode != "self":
                        self._timed(mode_run(mode), self.stage3, mode_run(mode)[3:])
        if "rl" not in skip:
            for algo in ("grpo", "tpma"):
                self._timed(f"rl_{algo}", self.rl, algo)
        problems = []
        if "eval" not in skip:
            problems = self.evaluate()
        return problems


def _mode_from_run(kind: str) -> str:
    """Undo :func:`mode_run`'s name mangling for CODI variants."""
    if kind.startswith("codi_l1"):
        return "+".join(["codi_l1"] + [p for p in kind[len("codi_l1"):].split("_") if p])
    return kind


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else str(v)


def _write_table(stem: Path, rows: list[dict]) -> None:
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    stem.with_suffix(".csv").write_text(buf.getvalue())
    stem.with_suffix(".jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
