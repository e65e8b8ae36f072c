"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest
from sklearn.model_selection import StratifiedGroupKFold

import oracles
from acceptance_log import criterion
from cryptocatch.blacklist import BlacklistStore
from cryptocatch.boosting import BoostedTreeClassifier, best_split, feature_importance
from cryptocatch.features import calculators as calc
from cryptocatch.features import default_catalog, feature_frame
from cryptocatch.flows import BENIGN, segment_flows
from cryptocatch.metrics import confusion_and_prf, mlogloss, pick_threshold, roc_auc, sweep_thresholds
from cryptocatch.pipeline import PipelineConfig, detect, featurize, model_specs, window_scores
from cryptocatch.probe import ALL_VARIANTS, Outcome, ProbeTarget, ProbeVerdict, ProtocolVariant, probe_one
from cryptocatch.selection import benjamini_hochberg, significance_report
from cryptocatch.sim.pool import RespondError, SilentDrop, closed_port, serve_html, serve_json_echo, serve_pool
from cryptocatch.sim.traffic import SynthProfile, synthesize, synthesize_mixed

CLOSED_FORM_TOL = 1e-9
LSQ_TOL = 1e-6
PROBE_LIMIT_S = 0.255 + 0.050


# ---- shared helpers ----


def series_bank(seed, count=100):
    """``count`` series of length 2..10, half Gaussian and half packet-length-like integers."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        n = int(rng.integers(2, 11))
        out.append(rng.normal(0, 5, n) if i % 2 else rng.integers(30, 1500, n).astype(float))
    return out


def agree(got, ref, tol):
    if ref is None or (isinstance(ref, float) and math.isnan(ref)):
        return calc.is_missing(got)
    return not calc.is_missing(got) and abs(got - ref) <= tol * max(1.0, abs(ref))


def angle_agree(got, x, k, tol):
    ref = oracles.fft_coefficient(list(x), k, "angle")
    if isinstance(ref, float) and math.isnan(ref):
        return calc.is_missing(got)
    if abs(oracles.dft(list(x), k)) < 1e-6:
        return -180 < got <= 180  # phase of a vanishing coefficient is arbitrary
    d = (got - ref + 180.0) % 360.0 - 180.0
    return abs(d) <= CLOSED_FORM_TOL * 180


def oracle_value(spec, x):
    """Reference value of one catalog feature, computed by the oracle module."""
    f, p = spec.function, spec.kwargs
    xs = list(x)
    if f in calc.BASIC_STATS:
        return oracles.basic_stats(xs)[f], CLOSED_FORM_TOL
    if f in calc.ROLLING_STATS:
        return oracles.rolling_stats(xs, p["w"])[f], CLOSED_FORM_TOL
    if f == "sum_values":
        return oracles.sum_values(xs), CLOSED_FORM_TOL
    if f == "mean_n_absolute_max":
        return oracles.mean_n_absolute_max(xs, p["n"]), CLOSED_FORM_TOL
    if f == "c3":
        return oracles.c3(xs, p["lag"]), CLOSED_FORM_TOL
    if f == "binned_entropy":
        return oracles.binned_entropy(xs, p["max_bins"]), CLOSED_FORM_TOL
    if f == "index_mass_quantile":
        return oracles.index_mass_quantile(xs, p["q"]), CLOSED_FORM_TOL
    if f == "number_cwt_peaks":
        return oracles.cwt_peaks(xs, p["max_width"]), CLOSED_FORM_TOL
    if f == "fft_coefficient":
        return oracles.fft_coefficient(xs, p["k"], p["attr"]), CLOSED_FORM_TOL
    if f == "autocorrelation":
        return (oracles.autocorrelation(xs, p["lag"]) if p["lag"] < len(xs) else math.nan), CLOSED_FORM_TOL
    if f == "ar_coefficient":
        coef = oracles.ar_coefficients(xs, p["order"]) if len(xs) > p["order"] else None
        return (None if coef is None else float(coef[p["k"]])), LSQ_TOL
    if f in ("friedrich_coefficients", "max_langevin_fixed_point"):
        bx, by = oracles.friedrich_pairs(xs, p["r"]) if len(xs) > 1 else ([], [])
        if len(bx) < p["m"] + 1:
            return None, LSQ_TOL
        coef = oracles.polyfit_qr(bx, by, p["m"])
        if f == "friedrich_coefficients":
            return float(coef[p["coeff"]]), LSQ_TOL
        return oracles.largest_real_root(coef), LSQ_TOL
    raise KeyError(f)


def calc_value(spec, x):
    f, p = spec.function, spec.kwargs
    if f in calc.BASIC_STATS:
        return calc.basic_stats(x)[f]
    if f in calc.ROLLING_STATS:
        return calc.rolling_stats(x, p["w"])[f]
    if f == "friedrich_coefficients":
        return float(calc.friedrich_coefficients(x, p["m"], p["r"])[p["coeff"]])
    return getattr(calc, f)(x, **p)


def window_frame(corpus):
    windows = segment_flows(corpus.records, labels=corpus.labels)
    frame = feature_frame(windows)
    labels = frame.pop("label").to_numpy()
    frame.pop("window_id")
    groups = np.array([str(w.key) for w in windows])
    return windows, frame, labels, groups


def select(frame, labels):
    report = significance_report(frame.to_numpy(), labels, 0.01, list(frame.columns))
    return [n for n, keep in zip(report.names, report.selected) if keep]


# ---- criteria ----


@criterion(1, "feature oracles")
def test_criterion_1_feature_oracles():
    start = time.perf_counter()
    specs = [s for s in default_catalog() if s.source == "len"]
    functions = sorted({s.function for s in specs})
    checked = {f: 0 for f in functions}
    failures = []
    for si, spec in enumerate(specs):
        for x in series_bank(1000 + si):
            got = calc_value(spec, x)
            if spec.function == "fft_coefficient" and spec.kwargs["attr"] == "angle":
                ok = angle_agree(got, x, spec.kwargs["k"], CLOSED_FORM_TOL)
            else:
                ref, tol = oracle_value(spec, x)
                ok = agree(got, ref, tol)
            checked[spec.function] += 1
            if not ok:
                failures.append((spec.name, list(x)))
    elapsed = time.perf_counter() - start
    assert not failures, f"{len(failures)} mismatches, first {failures[0]}"
    assert min(checked.values()) >= 100
    assert elapsed < 10.0, f"oracle suite took {elapsed:.1f}s"
    return f"{len(functions)} functions, {sum(checked.values())} comparisons, {elapsed:.1f}s"


@criterion(2, "Benjamini-Hochberg")
def test_criterion_2_bh():
    rep = benjamini_hochberg([0.001, 0.002, 0.03, 0.5], 0.01)
    np.testing.assert_allclose(rep.adjusted, [0.004, 0.004, 0.04, 0.5], rtol=0, atol=1e-15)
    assert rep.selected.tolist() == [True, True, False, False]
    rng = np.random.default_rng(77)
    for _ in range(1000):
        m = int(rng.integers(1, 60))
        p = np.where(rng.uniform(size=m) < rng.uniform(), rng.uniform(0, 0.003, m), rng.uniform(0, 1, m))
        if rng.uniform() < 0.2:
            p[rng.integers(0, m)] = p[0]
        alpha = float(rng.choice([0.01, 0.05, 0.1]))
        assert set(np.flatnonzero(benjamini_hochberg(p, alpha).selected)) == oracles.bh_step_up(list(p), alpha)
    return "hand example and 1000 random vectors"


@criterion(3, "boosting split oracle and monotone loss")
def test_criterion_3_gbdt():
    rng = np.random.default_rng(303)
    for _ in range(500):
        n, d = int(rng.integers(2, 9)), int(rng.integers(1, 4))
        x = rng.integers(0, 4, size=(n, d)).astype(float) if rng.uniform() < 0.5 else rng.normal(size=(n, d))
        g, h = rng.normal(size=n), rng.uniform(0.05, 1.0, n)
        lam, gamma, mcw = float(rng.choice([0.0, 1.0])), float(rng.choice([0.0, 0.01])), float(rng.choice([0, 0.3]))
        ours, ref = best_split(x, g, h, lam, gamma, mcw), oracles.best_split(x, g, h, lam, gamma, mcw)
        if ref is None:
            assert ours is None
        else:
            assert ours[1] == ref[1] and frozenset(np.flatnonzero(x[:, ours[1]] < ours[2])) == ref[3]
            assert abs(ours[0] - ref[0]) <= 1e-9
    worst = -np.inf
    for seed in range(4):
        for k in (2, 4):
            X = rng.normal(size=(150, 6))
            y = np.argmax(X[:, :k] + rng.normal(0, 0.7, (150, k)), axis=1)
            model = BoostedTreeClassifier(subsample=1.0, colsample_bytree=1.0, num_rounds=50, seed=seed).fit(X, y)
            diffs = np.diff(model.train_loss_)
            assert len(model.train_loss_) == 51
            worst = max(worst, diffs.max())
            assert np.all(diffs <= 1e-9)
    return f"500 split datasets; max per-round loss change {worst:.2e}"


@criterion(4, "binary pipeline, 5-fold CV")
def test_criterion_4_binary_cv():
    start = time.perf_counter()
    corpus = synthesize_mixed(1000, 1000, seed=4)
    _, frame, labels, groups = window_frame(corpus)
    y = (labels != BENIGN).astype(int)
    f1s, aucs = [], []
    folds = StratifiedGroupKFold(n_splits=5, shuffle=True, random_state=0)
    for tr, te in folds.split(frame, y, groups):
        cols = select(frame.iloc[tr], y[tr])  # selection sees training rows only
        model = BoostedTreeClassifier().fit(frame.iloc[tr][cols], y[tr])
        score = model.positive_score(frame.iloc[te][cols])
        f1s.append(confusion_and_prf(score, y[te], 0.5).f1)
        aucs.append(roc_auc(score, y[te]).auc)
    elapsed = time.perf_counter() - start
    f1, auc = float(np.mean(f1s)), float(np.mean(aucs))
    assert f1 >= 0.95 and auc >= 0.98, (f1, auc)
    assert elapsed < 120.0, f"{elapsed:.1f}s"
    return f"F1 {f1:.4f}, AUC {auc:.5f}, {len(y)} windows, {elapsed:.1f}s"


@criterion(5, "multiclass pipeline")
def test_criterion_5_multiclass():
    assert abs(mlogloss(np.eye(7), np.full((7, 7), 1 / 7)) - math.log(7)) <= 1e-12
    corpus = synthesize(SynthProfile("mining", seed=5), 2100)
    assert sorted(np.unique(list(corpus.labels.values()), return_counts=True)[1]) == [300] * 7
    _, frame, labels, groups = window_frame(corpus)
    tr, te = next(StratifiedGroupKFold(n_splits=5, shuffle=True, random_state=0).split(frame, labels, groups))
    cols = select(frame.iloc[tr], labels[tr])
    model = BoostedTreeClassifier(num_rounds=50).fit(frame.iloc[tr][cols], labels[tr])
    acc = float(np.mean(model.predict(frame.iloc[te][cols]) == labels[te]))
    final = model.train_loss_[-1]
    assert model.task_ == "multiclass" and len(model.trees_) == 50 and len(model.trees_[0]) == 7
    assert acc >= 0.90 and final < 0.3, (acc, final)
    return f"held-out accuracy {acc:.4f}, final train mlogloss {final:.4f}"


@criterion(6, "threshold policies")
def test_criterion_6_threshold_policies():
    rng = np.random.default_rng(606)
    for _ in range(200):
        n = int(rng.integers(2, 100))
        truth = rng.uniform(size=n) < rng.uniform(0.2, 0.8)
        truth[:2] = True, False
        scores = np.clip(truth * rng.uniform(0.1, 0.8) + rng.normal(0, rng.uniform(0.1, 0.5), n), 0, 1)
        if rng.uniform() < 0.3:
            scores = np.round(scores, 2)
        rows = []
        for i in range(101):
            *_, p, r, f = oracles.confusion(scores, truth, i / 100)
            rows.append((i / 100, r, f))
        best = max(f for _, _, f in rows)
        want_f1 = min(t for t, _, f in rows if f == best)
        want_sens = max((r, f, -t) for t, r, f in rows if f >= 0.99 * best)
        table = sweep_thresholds(scores, truth)
        f1_pol, sens = pick_threshold(table, "optimal_f1"), pick_threshold(table, "optimal_sensitivity")
        assert f1_pol.threshold == want_f1
        assert sens.threshold == -want_sens[2]
        assert sens.recall >= f1_pol.recall
    return "200 score sets agree with brute force"


@criterion(7, "probe protocol coverage")
def test_criterion_7_probe_matrix(pool_matrix):
    slowest = 0.0

    def timed(target, variants=ALL_VARIANTS):
        nonlocal slowest
        t0 = time.perf_counter()
        v = probe_one(target, variants)
        slowest = max(slowest, time.perf_counter() - t0)
        return v

    for (variant, kind), server in pool_matrix.items():
        v = timed(ProbeTarget(server.host, server.port))
        assert (v.outcome, v.variant, v.response_kind) == (Outcome.POSITIVE, variant, kind), (variant, kind, v)
    html, echo = serve_html(), serve_json_echo()
    silent = [serve_pool(v, SilentDrop) for v in ALL_VARIANTS]
    try:
        got = [timed(ProbeTarget(s.host, s.port)).outcome for s in (html, echo)]
        got.append(timed(ProbeTarget("127.0.0.1", closed_port())).outcome)
        assert got == [Outcome.NEGATIVE, Outcome.NEGATIVE, Outcome.UNREACHABLE]
        for s in silent:
            assert timed(ProbeTarget(s.host, s.port)).outcome is Outcome.SILENT
    finally:
        for s in (html, echo, *silent):
            s.stop()
    assert slowest <= PROBE_LIMIT_S, f"slowest probe {slowest * 1000:.0f} ms"
    return f"8/8 pools, 3 mocks, 4 silent; slowest {slowest * 1000:.0f} ms"


@pytest.fixture(scope="module")
def stage1_model():
    """Binary model plus a sensitivity-policy threshold from a held-out corpus."""
    _, frame, labels, _ = window_frame(synthesize_mixed(600, 600, seed=11))
    y = (labels != BENIGN).astype(int)
    cols = select(frame, y)
    model = BoostedTreeClassifier().fit(frame[cols], y)
    val = synthesize_mixed(300, 300, seed=12)
    vw = segment_flows(val.records, labels=val.labels)
    scores = window_scores(model, featurize(vw, model_specs(model)))
    truth = np.array([w.label != BENIGN for w in vw])
    policy = pick_threshold(sweep_thresholds(scores, truth), "optimal_sensitivity")
    return model, policy, frame, y


@criterion(8, "end-to-end false-positive suppression")
def test_criterion_8_end_to_end(stage1_model, tmp_path):
    model, policy, _, _ = stage1_model
    pools = [serve_pool(ProtocolVariant.BTC), serve_pool(ProtocolVariant.XMR), serve_pool(ProtocolVariant.ETH, RespondError),
             serve_pool(ProtocolVariant.WEBMINE), serve_pool(ProtocolVariant.XMR, tls=True)]
    benign = [serve_html() for _ in range(10)] + [serve_json_echo() for _ in range(10)]
    heartbeat = [serve_json_echo() for _ in range(4)]
    try:
        planted = sorted((p.host, p.port) for p in pools)
        corpus = synthesize_mixed(
            100, 400, seed=13, pool_destinations=planted,
            benign_destinations=[(b.host, b.port) for b in benign],
            heartbeat_destinations=[(b.host, b.port) for b in heartbeat],
        )
        store = BlacklistStore(tmp_path / "journal.ndjson")
        cfg = PipelineConfig(threshold=policy.threshold, threshold_policy="sensitivity")
        report = detect(corpus.records, cfg, model=model, store=store, labels=corpus.labels)
    finally:
        for s in (*pools, *benign, *heartbeat):
            s.stop()
    s = report.summary()
    benign_endpoints = {e for e, mining in report.endpoint_labels.items() if not mining}
    assert len(benign_endpoints) >= 20
    assert report.confirmed == planted
    assert s["confirmed_fp"] == 0
    assert set(report.probed) <= set(report.suspicious)
    assert sorted(store.live_view()) == planted
    return (f"threshold {policy.threshold:.2f}; {s['suspicious_endpoints']} suspicious endpoints "
            f"({s['classifier_fp_endpoints']} classifier FPs), confirmed {s['confirmed']}/5, 0 false confirmations")


@criterion(9, "stage-1 throughput (top-10 features)")
def test_criterion_9_throughput(stage1_model):
    model, _, frame, y = stage1_model
    top = [n for n, _ in feature_importance(model)[:10]]
    small = BoostedTreeClassifier().fit(frame[top], y)
    corpus = synthesize_mixed(500, 500, seed=14)
    windows = segment_flows(corpus.records)
    specs = model_specs(small)
    featurize(windows[:50], specs)  # warm-up
    start = time.perf_counter()
    window_scores(small, featurize(windows, specs))
    rate = len(windows) / (time.perf_counter() - start)
    assert rate >= 1000, f"{rate:.0f} windows/s"
    return f"{rate:.0f} windows/s on {len(windows)} windows (reference figure: 4000 flows/s)"


@criterion(10, "blacklist kill-and-reload")
def test_criterion_10_blacklist_durability(tmp_path):
    rng = np.random.default_rng(1010)
    t0 = 1_700_000_000.0
    cuts = 0
    for seq in range(100):
        path = tmp_path / f"journal-{seq}.ndjson"
        mode = "batch" if seq % 2 else "realtime"
        store = BlacklistStore(path, mode=mode)
        clock = t0
        snapshots = [(b"", {})]
        for _ in range(int(rng.integers(1, 30))):
            clock += float(rng.integers(0, 4000))
            if rng.uniform() < 0.75:
                h = int(rng.integers(0, 6))
                verdict = ProbeVerdict(ProbeTarget(f"10.1.0.{h}", 3333 + h % 2), Outcome.POSITIVE,
                                       ALL_VARIANTS[h % 4], "success")
                store.confirm(verdict, clock)
            else:
                store.flush(clock)
            data = path.read_bytes() if path.exists() else b""
            if data != snapshots[-1][0]:
                snapshots.append((data, store.durable_view()))
        final = snapshots[-1][0]
        for data, view in snapshots:
            assert final.startswith(data)
            path.write_bytes(data)
            assert BlacklistStore(path).live_view() == view
        # every line boundary and one torn cut inside each line
        offsets = [0] + [i + 1 for i, b in enumerate(final) if b == ord("\n")]
        for a, b in zip(offsets, offsets[1:]):
            for cut in (b, (a + b) // 2):
                path.write_bytes(final[:cut])
                expected = {}
                for line in final[: b if cut == b else a].decode().splitlines():
                    obj = json.loads(line)
                    expected[(obj["host"], obj["port"])] = obj
                got = {k: json.loads(e.to_json()) for k, e in BlacklistStore(path).live_view().items()}
                assert got == expected
                cuts += 1
    return f"100 sequences, {cuts} journal cuts reloaded exactly"
