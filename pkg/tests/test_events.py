import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ramp_odo.events import (N_BINS, EgmConfig, Event, EventStream, FormatError, build_stack, read_evt,
                             slice_last_n, stack_last_n, synthesize_events, write_evt)


def random_stream(rng, n, W=16, H=12, t1=1.0):
    return EventStream(W, H, np.sort(rng.uniform(0, t1, n)), rng.integers(0, W, n), rng.integers(0, H, n),
                       rng.choice([-1, 1], n))


def test_single_event_lands_in_its_bin():
    ev = EventStream.from_events(8, 8, [Event(0.5, 3, 2, 1)])
    st_ = build_stack(ev, 8, 8, 0.0, 1.0)
    assert st_.data.shape == (N_BINS, 8, 8)
    assert st_.data[2, 2, 3] == 1
    assert np.count_nonzero(st_.data) == 1


def test_empty_slice_gives_zero_stack():
    st_ = build_stack(EventStream.empty(6, 4), 6, 4, 0.0, 1.0)
    assert st_.data.shape == (N_BINS, 4, 6) and not st_.data.any()


def test_stack_matches_bruteforce_recount(rng):
    ev = random_stream(rng, 1000)
    st_ = build_stack(ev, 16, 12, 0.0, 1.0)
    ref = np.zeros((N_BINS, 12, 16))
    for t, x, y, p in zip(ev.t, ev.x, ev.y, ev.p):
        b = 0
        while b < N_BINS - 1 and t >= (b + 1) / N_BINS:
            b += 1
        ref[b, y, x] += p
    np.testing.assert_array_equal(st_.data, ref)


def test_stack_errors():
    ev = EventStream.from_events(8, 8, [Event(0.5, 7, 2, 1)])
    with pytest.raises(IndexError, match="event 0"):
        build_stack(ev, 4, 4, 0.0, 1.0)
    with pytest.raises(ValueError, match="invalid window"):
        build_stack(ev, 8, 8, 1.0, 1.0)


def test_slice_last_n():
    ev = EventStream.from_events(4, 4, [Event(1, 0, 0, 1), Event(2, 1, 0, 1), Event(3, 2, 0, -1)])
    np.testing.assert_array_equal(slice_last_n(ev, 2, 2.5).t, [1, 2])
    assert stack_last_n(ev, 2, 0.5) is None


def test_event_columns_validate():
    with pytest.raises(ValueError):
        EventStream(4, 4, [2.0, 1.0], [0, 0], [0, 0], [1, 1])


def test_constant_video_has_no_events():
    frames = [(np.full((5, 7), 0.3), float(k)) for k in range(4)]
    assert len(synthesize_events(frames)) == 0


def test_negative_intensity_rejected():
    with pytest.raises(ValueError, match="negative"):
        synthesize_events([(np.zeros((2, 2)), 0.0), (-np.ones((2, 2)), 1.0)])


def test_log_ramp_crossing_times():
    eps = EgmConfig().log_eps
    frames = [(np.full((1, 1), np.exp(0.0) - eps), 0.0), (np.full((1, 1), np.exp(1.0) - eps), 1.0)]
    ev = synthesize_events(frames, EgmConfig(contrast_threshold=0.2))
    np.testing.assert_allclose(ev.t, [0.2, 0.4, 0.6, 0.8, 1.0], atol=1e-9)
    assert np.all(ev.p == 1)


def dense_crossings(L, ts, C, steps=20000):
    """Reference: sample the interpolated log signal densely and fire on each
    lattice crossing of the reference level."""
    out = []
    ref = L[0]
    for k in range(1, len(L)):
        s = np.linspace(0, 1, steps + 1)[1:]
        sig = L[k - 1] + s * (L[k] - L[k - 1])
        for a, v in zip(s, sig):
            while v >= ref + C - 1e-12:
                ref += C
                out.append((ts[k - 1] + a * (ts[k] - ts[k - 1]), 1))
            while v <= ref - C + 1e-12:
                ref -= C
                out.append((ts[k - 1] + a * (ts[k] - ts[k - 1]), -1))
    return out


def test_egm_matches_dense_sampling(rng):
    C = 0.15
    L = np.cumsum(rng.normal(0, 0.3, 6))
    ts = np.arange(6) * 0.1
    eps = EgmConfig().log_eps
    frames = [(np.full((1, 1), np.exp(v) - eps), t) for v, t in zip(L, ts)]
    ev = synthesize_events(frames, EgmConfig(contrast_threshold=C))
    ref = dense_crossings(L, ts, C)
    assert len(ev) == len(ref)
    np.testing.assert_array_equal(ev.p, [p for _, p in ref])
    np.testing.assert_allclose(ev.t, [t for t, _ in ref], atol=0.1 / 20000 + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_egm_residual_bound(seed):
    rng = np.random.default_rng(seed)
    H, W = 6, 8
    yy, xx = np.mgrid[0:H, 0:W]
    a, b, w = rng.uniform(0.05, 0.5, 3)
    frames = [(0.5 + 0.4 * np.sin(a * xx + b * yy + w * k), 0.05 * k) for k in range(5)]
    cfg = EgmConfig(contrast_threshold=rng.uniform(0.05, 0.3))
    ev = synthesize_events(frames, cfg)
    net = np.zeros((H, W))
    np.add.at(net, (ev.y.astype(int), ev.x.astype(int)), ev.p)
    dL = np.log(frames[-1][0] + cfg.log_eps) - np.log(frames[0][0] + cfg.log_eps)
    assert np.all(np.abs(cfg.contrast_threshold * net - dL) < cfg.contrast_threshold)


def test_evt_round_trip_is_byte_exact(tmp_path, rng):
    ev = random_stream(rng, 300)
    p1, p2 = tmp_path / "a.evt", tmp_path / "b.evt"
    write_evt(p1, ev)
    back = read_evt(p1)
    for k in "txyp":
        np.testing.assert_array_equal(getattr(back, k), getattr(ev, k))
    write_evt(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_evt_malformed_reports_offset(tmp_path, rng):
    p = tmp_path / "a.evt"
    write_evt(p, random_stream(rng, 10))
    raw = bytearray(p.read_bytes())
    raw[20 + 16 * 3 + 12] = 5     # polarity of record 3
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        read_evt(p)
    assert exc.value.offset == 20 + 16 * 3 + 12
    p.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError, match="magic"):
        read_evt(p)
    p.write_bytes(bytes(raw[:40]))
    with pytest.raises(FormatError, match="expected"):
        read_evt(p)
