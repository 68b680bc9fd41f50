"""Exit criteria.  Each test prints one PASS/FAIL line (see conftest.py).

Criteria 6 to 9 share one session-scoped ``Lab`` that trains each model once:
phase 1 is trained a single time and cloned into the ablation arms.
"""

import functools
import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from flamenav import numerics as nx
from flamenav.cli import main as cli_main
from flamenav.metrics import dtw, ndtw, rc, ra, score_rationales, spd, tc, EvalEpisode, calibrate
from flamenav.model import FlameModel, ModelConfig, Vocab, clone_params, forward, init_params, pattern, route_stream, strided_gated_xattn
from flamenav.numerics import Tensor
from flamenav.pipeline import RunConfig, make_datasets, make_worlds, split_records, train_phases, full_run
from flamenav.rollout import DecodeConfig, Sample, evaluate_baseline, evaluate_split, run_episode, tally
from flamenav.world import Action, AgentState, WorldParams, generate_world, shortest_path_dist
from helpers import (
    dense_xattn,
    greedy_oracle,
    op_cases,
    recompute_rc_ra,
    synthetic_episode,
    tiny_cfg,
    tiny_params,
    vote_oracle,
)

pytestmark = pytest.mark.acceptance

MAIN = RunConfig()  # 10 worlds of 8x8, 9000 nav routes, p1/p2/nav = 3/3/8 epochs
SWEEP_NAV_EPOCHS = 4
SWEEP_P2_EPOCHS = 2
SEEDS = (0, 1, 2)
STRIDES = (1, 2, 4, None)
VOTE = dict(temperature=1.0, paths=8, rationale_mode=True)
TINY = {
    "n_worlds": 2,
    "world": {"width": 6, "height": 6},
    "n_p1": 60,
    "n_p2": 40,
    "n_nav": 120,
    "n_dev": 10,
    "model": {"d_model": 16, "n_heads": 2, "n_lm_blocks": 1, "n_visual_tokens": 2, "max_seq_len": 384},
    "p1": {"epochs": 1},
    "p2": {"epochs": 1},
    "nav": {"epochs": 2},
    "decode": {"max_steps": 25},
}


def clone(m: FlameModel, **cfg_changes) -> FlameModel:
    cfg = m.cfg.replace(**cfg_changes) if cfg_changes else m.cfg
    return FlameModel(cfg, m.vocab, clone_params(m.params))


class Lab:
    """Lazily trained models shared by criteria 6 to 9."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.worlds = make_worlds(cfg)
        self.W = {g.world_id: g for g in self.worlds}
        self.data = make_datasets(cfg, self.worlds)
        self.dev = split_records(self.data["nav"], "dev", cfg.n_dev)
        self.seconds: dict[str, float] = {}

    def _train(self, cfg, model=None, history=(), phases=None):
        run = train_phases(cfg, self.worlds, self.data, model, history, phases)
        return run

    @functools.cached_property
    def p1(self):
        run = self._train(self.cfg, phases=["p1"])
        self.seconds["p1"] = run.seconds["p1"]
        return run.model

    @functools.cached_property
    def p2(self):
        run = self._train(self.cfg, clone(self.p1), ["p1"], ["p2"])
        self.seconds["p2"] = run.seconds["p2"]
        return run.model

    @functools.cached_property
    def full(self):
        run = self._train(self.cfg, clone(self.p2), ["p1", "p2"], ["nav"])
        self.seconds["nav"] = run.seconds["nav"]
        return run.model

    @functools.cached_property
    def p1_only(self):
        return self._train(replace(self.cfg, skip=("p2",)), clone(self.p1), ["p1"], ["nav"]).model

    @functools.cached_property
    def scratch(self):
        return self._train(replace(self.cfg, skip=("p1", "p2")), phases=["nav"]).model

    @functools.cached_property
    def with_rationales(self):
        cfg = replace(self.cfg, nav=replace(self.cfg.nav, with_rationales=True))
        return self._train(cfg, clone(self.p2), ["p1", "p2"], ["nav"]).model

    @functools.cache
    def report(self, name: str, decode: DecodeConfig = DecodeConfig()):
        return evaluate_split(getattr(self, name), self.W, self.dev, decode)

    def sweep_point(self, stride, seed):
        """Stride-ablation run: same data, per-seed shared phase 1, shorter p2/nav."""
        cfg = replace(
            self.cfg,
            seed=seed,
            model=self.cfg.model.replace(stride=stride),
            p2=replace(self.cfg.p2, epochs=SWEEP_P2_EPOCHS),
            nav=replace(self.cfg.nav, epochs=SWEEP_NAV_EPOCHS),
        )
        base = self._sweep_p1(seed)
        model = clone(base, stride=stride)
        run = self._train(cfg, model, ["p1"], ["p2", "nav"])
        return evaluate_split(run.model, self.W, self.dev, DecodeConfig()).tc

    @functools.cache
    def _sweep_p1(self, seed):
        # a single observation fits every window, so phase 1 does not depend on stride
        return self._train(replace(self.cfg, seed=seed), phases=["p1"]).model


@pytest.fixture(scope="session")
def lab():
    return Lab(MAIN)


# ----------------------------------------------------------------- 1


def test_c01_strided_attention_equivalence(verdict):
    rng = np.random.default_rng(0)
    worst, sizes_ok, n = 0.0, True, 0
    for t_max, stride, n_r in itertools.product(range(1, 21), (1, 2, 4, 8, None), (1, 4, 8)):
        cfg = tiny_cfg(stride=stride, n_visual_tokens=n_r)
        P = tiny_params(cfg, n)
        x = rng.standard_normal((2, 6, cfg.d_model))
        bank = rng.standard_normal((2, t_max * n_r, cfg.d_model))
        obs = np.sort(rng.integers(0, t_max + 1, size=(2, 6)), axis=1)
        obs[:, -1] = t_max
        got = strided_gated_xattn(P, "xattn0", cfg, Tensor(x), Tensor(bank), obs, t_max).data
        worst = max(worst, float(np.max(np.abs(got - dense_xattn(P, "xattn0", cfg, x, bank, obs)))))
        for t in range(t_max + 1):
            l = t if stride is None else stride
            sizes_ok &= len(pattern(t, stride, n_r)) == min(t, l) * n_r
        n += 1
    ok = worst < 1e-10 and sizes_ok
    verdict(1, ok, f"{n} configs, max |strided - dense| = {worst:.2e}, pattern sizes {'ok' if sizes_ok else 'WRONG'}")
    assert ok


# ----------------------------------------------------------------- 2


def test_c02_gradient_integrity(verdict):
    t0 = time.perf_counter()
    vocab = Vocab.from_tags()
    cfg = tiny_cfg(vocab_size=len(vocab))
    stream = route_stream(vocab, "go forward two blocks and stop .", [Action.FORWARD, Action.LEFT, Action.STOP])
    targets = np.array(stream.tokens[1:] + [0])
    weights = np.array([1.0] * (len(stream) - 1) + [0.0])
    worst_op, worst_model = 0.0, 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for name, (inputs, f) in op_cases(rng).items():
            worst_op = max(worst_op, max(nx.check_params(f, inputs, eps=1e-5, max_coords=16, rng=rng).values()))
        P = tiny_params(cfg, seed)
        feats = rng.standard_normal((3, cfg.feature_dim))
        loss = lambda: nx.cross_entropy(forward(P, cfg, stream, feats), targets, weights)
        worst_model = max(worst_model, max(nx.check_params(loss, P, eps=1e-5, max_coords=2, rng=rng).values()))
    secs = time.perf_counter() - t0
    ok = worst_op < 1e-4 and worst_model < 1e-4 and secs < 120
    verdict(2, ok, f"100 seeds: worst op rel err {worst_op:.2e}, full model {worst_model:.2e}, {secs:.0f}s")
    assert ok


# ----------------------------------------------------------------- 3


def test_c03_gate_zero_identity(verdict):
    vocab = Vocab.from_tags()
    results = []
    for dtype in ("float32", "float64"):
        cfg = ModelConfig(vocab_size=len(vocab), dtype=dtype)
        P = init_params(cfg, 7)
        s = route_stream(vocab, "turn left at the bank .", [Action.LEFT, Action.FORWARD, Action.STOP])
        feats = np.random.default_rng(1).standard_normal((3, cfg.feature_dim))
        results.append(np.array_equal(forward(P, cfg, s, feats).data, forward(P, cfg, s, None).data))
    ok = all(results)
    verdict(3, ok, f"fresh model logits with vs without observations identical (f32, f64): {results}")
    assert ok


# ----------------------------------------------------------------- 4


def _brute_dtw(g, P, R):
    best = np.inf

    def walk(i, j, cost):
        nonlocal best
        cost += shortest_path_dist(g, P[i], R[j])
        if cost >= best:
            return
        if (i, j) == (len(P) - 1, len(R) - 1):
            best = cost
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < len(P) and j + dj < len(R):
                walk(i + di, j + dj, cost)

    walk(0, 0, 0)
    return best


def test_c04_metric_oracles(verdict):
    rng = np.random.default_rng(0)
    dtw_ok = fw_ok = ident_ok = tc_ok = True
    for k in range(300):
        g = generate_world(k % 25, WorldParams(width=4, height=4, edge_drop=0.3))
        ids = sorted(g.nodes)
        P = [int(x) for x in rng.choice(ids, rng.integers(1, 7))]
        R = [int(x) for x in rng.choice(ids, rng.integers(1, 7))]
        dtw_ok &= dtw(g, P, R) == _brute_dtw(g, P, R)
        ident_ok &= ndtw(g, R, R) == 1.0
    for seed in range(10):
        g = generate_world(seed, WorldParams(width=10, height=5, edge_drop=0.4))
        D = np.full((50, 50), np.inf)
        np.fill_diagonal(D, 0)
        for u, v, _ in g.edges:
            D[u, v] = 1
        for m in range(50):
            D = np.minimum(D, D[:, [m]] + D[[m], :])
        for _ in range(100):
            a, goal, stop = (int(x) for x in rng.choice(50, 3))
            ep = EvalEpisode("r", "", [a, goal], [Action.STOP], [a, stop], [Action.STOP])
            fw_ok &= spd(g, ep) == D[stop, goal]
            tc_ok &= tc(g, ep) == int(spd(g, ep) <= 1)
    ok = dtw_ok and fw_ok and ident_ok and tc_ok
    verdict(4, ok, f"DTW=brute {dtw_ok}, SPD=Floyd-Warshall {fw_ok}, identical nDTW=1 {ident_ok}, TC<=>SPD<=1 {tc_ok}")
    assert ok


# ----------------------------------------------------------------- 5


def test_c05_rationale_metrics_and_calibration(verdict):
    rng = np.random.default_rng(1)
    eps, labels = zip(*(synthetic_episode(rng, i) for i in range(200)))
    scores = [score_rationales(e) for e in eps]
    agg_ok = (rc(scores), ra(scores)) == recompute_rc_ra(eps, labels)
    table = {
        (r, a, c): calibrate(r, a, c) for r, a, c in itertools.product((0, 1), (0, 1), (False, True))
    }
    expected = {k: (0, 1) if k == (1, 1, False) else (1, 1) if k == (1, 0, True) else k[:2] for k in table}
    cal_ok = table == expected
    ok = agg_ok and cal_ok
    verdict(5, ok, f"RC/RA on 200 episodes match recomputation: {agg_ok} (RC {rc(scores):.2f}, RA {ra(scores):.2f}); calibration table {cal_ok}")
    assert ok


# ----------------------------------------------------------------- 6


@pytest.mark.slow
def test_c06_toy_navigation(verdict, lab):
    rep = lab.report("full")
    train_secs = sum(lab.seconds[p] for p in ("p1", "p2", "nav"))
    rand = evaluate_baseline(lab.W, lab.dev, "random")
    n_train = len(split_records(lab.data["nav"], "train"))
    ok = rep.tc >= 80 and rep.ndtw >= 85 and train_secs <= 1800 and rand.tc < 20 and n_train >= 2000 and len(lab.dev) == 300
    verdict(
        6, ok,
        f"dev TC {rep.tc:.1f} nDTW {rep.ndtw / 100:.3f} SPD {rep.spd:.2f}; training {train_secs / 60:.1f} min on {n_train} routes; random TC {rand.tc:.1f}",
    )
    assert ok


# ----------------------------------------------------------------- 7


@pytest.mark.slow
def test_c07_phase_ablation(verdict, lab):
    none, p1, both = (lab.report(n).tc for n in ("scratch", "p1_only", "full"))
    ok = none <= p1 <= both and both - none >= 2
    verdict(7, ok, f"dev TC no-pretrain {none:.1f} <= P1-only {p1:.1f} <= P1+P2 {both:.1f} (gap {both - none:+.1f})")
    assert ok


# ----------------------------------------------------------------- 8


@pytest.mark.slow
def test_c08_stride_ablation(verdict, lab):
    tcs = {s: [lab.sweep_point(s, seed) for seed in SEEDS] for s in STRIDES}
    mean = {s: float(np.mean(v)) for s, v in tcs.items()}
    ok = mean[1] >= mean[None]
    shown = ", ".join(f"{'full' if s is None else s}: {mean[s]:.1f}" for s in STRIDES)
    verdict(8, ok, f"mean dev TC over seeds {list(SEEDS)} by stride: {shown}")
    assert ok


# ----------------------------------------------------------------- 9


@pytest.mark.slow
def test_c09_self_consistency(verdict, lab):
    # T=0, P=1 decoding is plain argmax decoding
    model = lab.full
    same = True
    for r in lab.dev[:30]:
        g = lab.W[r["world_id"]]
        start = AgentState(r["path"][0], r["start_heading"])
        got = run_episode(model, g, r["instruction"], start, DecodeConfig(), r["route_id"])
        acts = got[1][:-1] if got[4] else got[1]
        same &= acts == greedy_oracle(model, g, r["instruction"], start, DecodeConfig().max_steps)
    greedy = lab.report("with_rationales", DecodeConfig(rationale_mode=True))
    reseeded = lab.report("with_rationales", DecodeConfig(rationale_mode=True, seed=9))
    strip = lambda rep: {k: v for k, v in json.loads(rep.to_json()).items() if k != "config"}
    same &= strip(greedy) == strip(reseeded)
    voted = [lab.report("with_rationales", DecodeConfig(seed=s, **VOTE)).tc for s in SEEDS]
    rng = np.random.default_rng(3)
    oracle_ok = True
    for _ in range(1000):
        samples = [Sample(p, None, Action(int(rng.integers(5))), float(rng.choice([-1.0, -0.5])), 0.0) for p in range(int(rng.integers(1, 9)))]
        oracle_ok &= int(tally(samples).action) == vote_oracle(samples)
    ok = same and oracle_ok and float(np.mean(voted)) >= greedy.tc - 1.0
    verdict(
        9, ok,
        f"T=0/P=1 = greedy {same}; rationale model greedy TC {greedy.tc:.1f} (RC {greedy.rc}, RA {greedy.ra}) vs T=1.0/P=8 TC "
        f"{', '.join(f'{v:.1f}' for v in voted)} (mean {np.mean(voted):.1f}); voting = counting oracle {oracle_ok}",
    )
    assert ok


# ----------------------------------------------------------------- 10


def test_c10_reproducibility(verdict, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**TINY, "seed": 11}))
    blobs = []
    for name in ("a", "b"):
        assert cli_main(["run", "--config", str(cfg_path), "--out", str(tmp_path / name)]) == 0
        blobs.append({f: (tmp_path / name / f).read_bytes() for f in ("report_dev.json", "model.ckpt", "nav.jsonl", "worlds.json")})
    same = blobs[0] == blobs[1]
    _, rep = full_run(RunConfig.from_dict({**TINY, "seed": 11}))
    same_api = json.loads(rep.to_json())["per_episode"] == json.loads(blobs[0]["report_dev.json"])["per_episode"]
    ok = same and same_api
    verdict(10, ok, f"two full pipeline runs under master seed 11: byte-identical artifacts {same}; API run agrees {same_api}")
    assert ok
