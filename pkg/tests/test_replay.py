import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_nstep, random_episodes, sampleable
from resfit.bc import DemoTrajectory, train_bc
from resfit.exceptions import (
    DimensionError,
    IntegrityError,
    NotReadyError,
    TruncatedStreamError,
    VersionMismatchError,
)
from resfit.replay import (
    ReplayStore,
    SegmentLog,
    Transition,
    TransitionArray,
    decode_segment,
    encode_segment,
    load_offline,
    make_offline,
)

GAMMA = 0.99


def tr(i, done=False, reward=0.0, od=3, ad=2):
    return Transition(np.full(od, float(i)), np.zeros(ad), np.zeros(ad), np.full(od, i + 1.0),
                      np.zeros(ad), reward, done)


def fake_demos(rng, count=10, length=30, od=4, ad=2):
    demos = []
    for k in range(count):
        obs = rng.normal(size=(length + 1, od))
        act = np.clip(rng.normal(size=(length, ad)), -1, 1)
        demos.append(DemoTrajectory(seed=k, obs=obs, act=act, success=True))
    return demos


@pytest.fixture(scope="module")
def demos_and_policy():
    rng = np.random.default_rng(0)
    demos = fake_demos(rng)
    policy = train_bc(demos, chunk_size=4, epochs=2, lr=1e-3, seed=0, hidden_dims=(16,))
    return demos, policy


def test_load_offline_counts(demos_and_policy):
    demos, policy = demos_and_policy
    off = load_offline(demos, policy, n_step=3)
    assert len(off) == 300
    assert int(off.reward[:300].sum()) == 10
    assert int(off.done[:300].sum()) == 10


def test_load_offline_stitching(demos_and_policy):
    demos, policy = demos_and_policy
    off = load_offline(demos, policy, n_step=3)
    for i in range(len(off) - 1):
        a, b = off.get(i), off.get(i + 1)
        if not a.done:
            assert np.array_equal(a.next_obs, b.obs)
            assert np.array_equal(a.next_base_action, b.base_action)


def test_load_offline_base_matches_fresh_rollout(demos_and_policy):
    demos, policy = demos_and_policy
    off = load_offline(demos, policy, n_step=3)
    row = 0
    for d in demos:
        stream = policy.stream()
        for t in range(len(d.act)):
            assert np.array_equal(off.get(row).base_action, stream(d.obs[t]))
            assert np.array_equal(off.get(row).full_action, d.act[t])
            row += 1


def test_load_offline_dim_mismatch(demos_and_policy):
    _, policy = demos_and_policy
    bad = [DemoTrajectory(0, np.zeros((3, 5)), np.zeros((2, 2)), True)]
    with pytest.raises(DimensionError):
        load_offline(bad, policy)


def test_ring_semantics():
    arr = TransitionArray(3, 2, capacity=5)
    for i in range(1, 8):
        arr.append(tr(i))
    assert [arr.get(r).obs[0] for r in range(len(arr))] == [3, 4, 5, 6, 7]


def test_new_episode_after_done():
    store = ReplayStore(3, 2, 10, n_step=1)
    store.push(tr(0))
    store.push(tr(1, done=True, reward=1.0))
    store.push(tr(2))
    eps = [store.online.get(i).episode_id for i in range(3)]
    assert eps == [0, 0, 1]


def test_push_dimension_mismatch():
    store = ReplayStore(3, 2, 10)
    with pytest.raises(DimensionError):
        store.push(tr(0, od=4))


def test_hand_summed_three_step():
    arr = make_offline([tr(0), tr(1), tr(2, done=True, reward=1.0)], 3, 2)
    b = arr.nstep(np.array([0]), 3, GAMMA)
    assert b.returns[0] == pytest.approx(0.9801, abs=1e-15)
    assert b.terminal[0] and b.effective_n[0] == 3


def test_one_step_is_plain_transition():
    arr = make_offline([tr(0, reward=0.0), tr(1, done=True, reward=1.0)], 3, 2)
    b = arr.nstep(np.array([0, 1]), 1, GAMMA)
    assert list(b.returns) == [0.0, 1.0]
    assert np.array_equal(b.lookahead_obs[0], arr.get(0).next_obs)
    assert list(b.terminal) == [False, True]


@given(seed=st.integers(0, 10**6), n=st.sampled_from([1, 2, 3, 5]),
       capacity=st.integers(3, 60), open_last=st.booleans())
@settings(max_examples=60, deadline=None)
def test_incremental_heads_match_oracle_under_eviction(seed, n, capacity, open_last):
    rng = np.random.default_rng(seed)
    episodes = random_episodes(rng, 8, max_len=12, open_last=open_last)
    arr = TransitionArray(3, 2, capacity)
    arr.track(n)
    flat = [(e, t) for e, ep in enumerate(episodes) for t in range(len(ep))]
    for k, (e, t) in enumerate(flat):
        arr.append(episodes[e][t])
        survivors = flat[max(0, k + 1 - capacity):k + 1]
        expect = []
        for row, (se, st_) in enumerate(survivors):
            ep = episodes[se]
            stored = [s for s in survivors if s[0] == se]
            last_t = stored[-1][1]
            visible = ep[:last_t + 1]
            if st_ + n <= len(visible) or visible[-1].done:
                expect.append(row)
        got = np.sort(arr.sampleable_heads(n))
        assert list(got) == expect
        assert list(np.sort(arr._scan_heads(n))) == expect


@given(seed=st.integers(0, 10**6), n=st.sampled_from([1, 2, 3, 5]))
@settings(max_examples=40, deadline=None)
def test_nstep_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    episodes = random_episodes(rng, 15, open_last=True)
    arr = make_offline([t for ep in episodes for t in ep], 3, 2)
    heads = arr.sampleable_heads(n)
    batch = arr.nstep(heads, n, GAMMA)
    rows = [(e, t) for e, ep in enumerate(episodes) for t in range(len(ep))]
    assert len(heads) == sum(sampleable(episodes[e], t, n) for e, t in rows)
    for k, h in enumerate(heads):
        e, t = rows[h]
        R, m, term, look = brute_nstep(episodes[e], t, n, GAMMA)
        assert batch.returns[k] == R
        assert batch.effective_n[k] == m and batch.terminal[k] == term
        assert np.array_equal(batch.lookahead_obs[k], look.next_obs)
        assert np.array_equal(batch.lookahead_base[k], look.next_base_action)


def symmetric_store(rng, n=3, count=30):
    off = make_offline([t for ep in random_episodes(rng, count) for t in ep], 3, 2)
    off.track(n)
    store = ReplayStore(3, 2, 10_000, off, n_step=n)
    for ep in random_episodes(rng, count):
        for t in ep:
            store.push(t)
    return store


def test_symmetric_halves():
    store = symmetric_store(np.random.default_rng(1), count=60)
    b = store.sample_symmetric(256, 3, GAMMA, np.random.default_rng(0))
    assert len(b) == 256
    assert int((b.source == 0).sum()) == 128 and int((b.source == 1).sum()) == 128


def test_online_only_sampling():
    store = symmetric_store(np.random.default_rng(1))
    b = store.sample_symmetric(31, 3, GAMMA, np.random.default_rng(0), use_offline=False)
    assert len(b) == 31 and (b.source == 1).all()


def test_not_ready_and_odd_batch():
    rng = np.random.default_rng(2)
    off = make_offline([t for ep in random_episodes(rng, 5) for t in ep], 3, 2)
    store = ReplayStore(3, 2, 100, off, n_step=3)
    with pytest.raises(NotReadyError):
        store.sample_symmetric(8, 3, GAMMA, rng)
    assert not store.ready(8, 3)
    with pytest.raises(ValueError):
        store.sample_symmetric(7, 3, GAMMA, rng)


def test_frontier_heads_unsampleable():
    store = ReplayStore(3, 2, 100, n_step=3)
    for i in range(4):
        store.push(tr(i))
    # rows 0 and 1 have three stored steps; rows 2 and 3 wait for their lookahead
    assert sorted(store.online.sampleable_heads(3)) == [0, 1]
    store.push(tr(4, done=True))
    assert sorted(store.online.sampleable_heads(3)) == [0, 1, 2, 3, 4]


def test_sampling_uniformity():
    arr = make_offline([tr(i, done=True) for i in range(100)], 3, 2)
    arr.track(1)
    store = ReplayStore(3, 2, 200, arr, n_step=1)
    for i in range(100):
        store.push(tr(i, done=True))
    rng = np.random.default_rng(3)
    counts = np.zeros(100)
    for _ in range(1000):
        b = store.sample_symmetric(200, 1, GAMMA, rng)
        off = b.obs[b.source == 0][:, 0].astype(int)
        counts += np.bincount(off, minlength=100)
    p = 1 / 100
    draws = counts.sum()
    assert draws == 10**5
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.max(np.abs(counts - draws * p)) < 5 * sigma


def test_offline_unchanged_by_rl_traffic():
    store = symmetric_store(np.random.default_rng(4))
    before = store.offline.digest()
    rng = np.random.default_rng(0)
    for _ in range(20):
        store.sample_symmetric(32, 3, GAMMA, rng)
        store.push(tr(0))
    assert store.offline.digest() == before


def test_snapshot_is_independent():
    store = symmetric_store(np.random.default_rng(5))
    snap = store.snapshot()
    size = len(snap.online)
    store.push(tr(9))
    assert len(snap.online) == size and len(store.online) == size + 1


def test_segment_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    ts = [t for ep in random_episodes(rng, 3) for t in ep]
    back = decode_segment(encode_segment(ts, 3, 2))
    for a, b in zip(ts, back):
        assert a.obs.tobytes() == b.obs.tobytes() and a.reward == b.reward
        assert (a.done, a.episode_id, a.step_index) == (b.done, b.episode_id, b.step_index)
    log = SegmentLog(tmp_path / "segs")
    entry = log.seal(ts, 3, 2)
    assert len(log.load(entry)) == len(ts)
    assert SegmentLog(tmp_path / "segs").segments == [entry]


def test_segment_corruption_detected(tmp_path):
    ts = [tr(i) for i in range(4)]
    log = SegmentLog(tmp_path)
    entry = log.seal(ts, 3, 2)
    path = tmp_path / entry["file"]
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        log.load(entry)
    with pytest.raises(TruncatedStreamError):
        decode_segment(encode_segment(ts, 3, 2)[:-8])
    with pytest.raises(VersionMismatchError):
        decode_segment(b"XXXX" + bytes(12))
