from decimal import Decimal, getcontext

import numpy as np
import pytest

from dotdfs.wanmodel import (
    DegenerateGrid,
    DomainError,
    ThroughputParams,
    ThroughputSample,
    aggregate_bw_bound,
    export_surface,
    fit_surface,
    format_mbit,
    load_samples,
    parallel_bw,
    recommend,
    save_samples,
    single_stream_bw,
)

MIB = 1024 * 1024
KIB = 1024


def decimal_eq1(mss, rtt, c, p):
    getcontext().prec = 50
    return float(Decimal(mss) / Decimal(rtt) * Decimal(c) / Decimal(p).sqrt())


# frozen from the Decimal evaluation above (50 significant digits)
EQ1_TESTBED = 1671315.7894736842


def test_eq1_testbed_value():
    bw = single_stream_bw(ThroughputParams(1460, 0.076, 1e-4, 0.87))
    oracle = decimal_eq1("1460", "0.076", "0.87", "0.0001")
    assert oracle == pytest.approx(EQ1_TESTBED, rel=1e-15)
    assert abs(bw - oracle) / oracle < 1e-9
    assert round(bw) == 1_671_316
    assert format_mbit(bw) == "13.4 Mbit/s"


def test_scaling_laws():
    base = single_stream_bw(ThroughputParams(1460, 0.05, 1e-3))
    assert single_stream_bw(ThroughputParams(1460, 0.05, 4e-3)) == pytest.approx(base / 2, rel=1e-15)
    assert single_stream_bw(ThroughputParams(1460, 0.1, 1e-3)) == pytest.approx(base / 2, rel=1e-15)


def test_eq3_exact_multiple():
    one = single_stream_bw(ThroughputParams(1460, 0.076, 1e-4))
    for n in range(1, 65):
        assert parallel_bw(ThroughputParams(1460, 0.076, 1e-4, n=n)) == n * one


def test_aggregate_bound_termwise():
    a = ThroughputParams(1460, 0.076, 1e-4)
    b = ThroughputParams(1460, 0.076, 4e-4)
    bw1 = single_stream_bw(a)
    assert aggregate_bw_bound([a, b]) == pytest.approx(bw1 + bw1 / 2, rel=1e-14)
    with pytest.raises(DomainError):
        aggregate_bw_bound([a, ThroughputParams(1460, 0.076, 1e-4, c=1.22)])
    with pytest.raises(DomainError):
        aggregate_bw_bound([])


@pytest.mark.parametrize("kwargs", [dict(p=0), dict(p=1.5), dict(rtt=0), dict(mss=-1), dict(n=0)])
def test_domain_errors(kwargs):
    args = dict(mss=1460, rtt=0.1, p=1e-3) | kwargs
    with pytest.raises(DomainError):
        ThroughputParams(**args)


def grid_samples(ns, ws, f):
    return [ThroughputSample(n, w, f(n, w)) for n in ns for w in ws]


def test_flat_surface():
    s = fit_surface(grid_samples([1, 2], [1, 2], lambda n, w: 7.0))
    assert s(1.5, 1.2) == 7.0
    rec = recommend(s)
    assert (rec.n, rec.window) == (1, 1)


def test_bilinear_reproduces_product_exactly():
    ns, ws = [1, 3, 8], [64 * KIB, 512 * KIB, 2 * MIB]
    s = fit_surface(grid_samples(ns, ws, lambda n, w: n * w))
    for n, w in [(2, 100_000), (5.5, 1_000_000), (7.9, 2 * MIB - 1)]:
        assert s(n, w) == pytest.approx(n * w, rel=1e-12)
    assert np.all(s.node_residuals(grid_samples(ns, ws, lambda n, w: n * w)) == 0)


def test_monotone_surface_picks_max_corner():
    s = fit_surface(grid_samples([1, 10, 20], [1, 5, 9], lambda n, w: n + w))
    rec = recommend(s)
    assert (rec.n, rec.window, rec.bw) == (20, 9, 29)


def concave(n, w):
    return -(n - 45) ** 2 - (w / (32 * KIB) - 64) ** 2 + 1000


def test_concave_recommendation_within_one_cell():
    ns = np.linspace(1, 60, 8)
    ws = np.linspace(64 * KIB, 4 * MIB, 8)
    s = fit_surface(grid_samples(ns, ws, concave))
    rec = recommend(s)
    dn, dw = ns[1] - ns[0], ws[1] - ws[0]
    assert abs(rec.n - 45) <= dn and abs(rec.window - 2 * MIB) <= dw
    assert np.all(s.node_residuals(grid_samples(ns, ws, concave)) == 0)


def test_paper_shaped_scatter_with_duplicates_and_gaps():
    rng = np.random.default_rng(0)
    ns = np.arange(1, 61, 5)
    ws = np.array([64, 128, 256, 512, 1024, 2048]) * KIB
    samples = []
    for _ in range(500):
        n, w = rng.choice(ns), rng.choice(ws)
        samples.append(ThroughputSample(n, w, float(rng.uniform(1e5, 2.5e6))))
    s = fit_surface(samples)
    assert np.all(s.node_residuals(samples) == 0)
    assert np.isfinite(s.z).all()


def test_missing_cells_filled():
    samples = [ThroughputSample(n, w, float(n + w)) for n in (1, 2, 3) for w in (1, 2, 3) if (n, w) != (2, 2)]
    s = fit_surface(samples)
    assert s(2, 2) == pytest.approx(4.0)
    corner = [ThroughputSample(n, w, float(n)) for n, w in ((1, 1), (2, 1), (1, 2), (3, 3))]
    assert np.isfinite(fit_surface(corner).z).all()


def test_degenerate_inputs():
    with pytest.raises(DegenerateGrid):
        fit_surface([ThroughputSample(1, 1, 1)] * 3)
    with pytest.raises(DegenerateGrid):
        fit_surface([ThroughputSample(1, w, 1) for w in range(4)])
    with pytest.raises(DomainError):
        ThroughputSample(1, 1, float("nan"))


def test_csv_roundtrip(tmp_path):
    samples = grid_samples([1, 4], [65536, 131072], lambda n, w: n * 1.5 + w)
    path = tmp_path / "s.csv"
    save_samples(samples, path)
    assert path.read_text().splitlines()[0] == "n,window_bytes,bw_bytes_per_s"
    assert load_samples(path) == samples
    out = tmp_path / "surface.csv"
    export_surface(fit_surface(samples), out, resolution=5)
    assert len(load_samples(out)) == 25
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        load_samples(path)
