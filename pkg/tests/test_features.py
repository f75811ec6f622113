import numpy as np
import pytest

from serpbandit.features import (
    FEATURE_DIM,
    CountStores,
    UrlNotShown,
    classify_outcome,
)

from conftest import make_serp


class TestClassifyOutcome:
    def test_clicked(self):
        serp = make_serp(clicks=[(12, 2)])
        assert classify_outcome(serp, 12) == ("clicked", 2)

    def test_skipped_above_click(self):
        # click at rank 3 (url 12); rank 1 (url 10) was examined and skipped
        serp = make_serp(clicks=[(12, 1)])
        assert classify_outcome(serp, 10) == ("skipped", None)

    def test_missed_below_click(self):
        serp = make_serp(clicks=[(12, 1)])
        assert classify_outcome(serp, 16) == ("missed", None)

    def test_no_clicks_all_missed(self):
        serp = make_serp()
        assert classify_outcome(serp, 14) == ("missed", None)

    def test_boundary_is_lowest_ranked_click(self):
        serp = make_serp(clicks=[(11, 1), (15, 1)])
        assert classify_outcome(serp, 14) == ("skipped", None)
        assert classify_outcome(serp, 16) == ("missed", None)

    def test_unknown_url(self):
        with pytest.raises(UrlNotShown):
            classify_outcome(make_serp(), 999)

    def test_total_function(self):
        serp = make_serp(clicks=[(13, 0), (17, 2)])
        kinds = [classify_outcome(serp, u)[0] for u in serp.url_ids()]
        assert len(kinds) == 10
        assert kinds.count("clicked") == 2
        # exactly one outcome per url, outcomes partition the serp
        assert kinds.count("skipped") + kinds.count("missed") == 8


class TestUpdateCounts:
    def test_single_grade2_click(self):
        stores = CountStores()
        serp = make_serp(urls=tuple(range(1, 11)), clicks=[(7, 2)])
        stores.update_counts(serp, session_id=3, user_id=9)
        for counters in (
            stores.session_store[(3, 7)],
            stores.user_store[(9, 7)],
            stores.global_store[7],
        ):
            assert counters.as_tuple() == (1, 0, 0, 1, 0, 0)

    def test_rank_one_above_click_is_skipped(self):
        stores = CountStores()
        serp = make_serp(urls=tuple(range(1, 11)), clicks=[(7, 2)])
        stores.update_counts(serp, session_id=3, user_id=9)
        assert stores.global_store[1].as_tuple() == (0, 0, 0, 1, 0, 1)
        assert stores.global_store[8].as_tuple() == (0, 0, 0, 1, 1, 0)

    def test_double_apply_doubles(self):
        serp = make_serp(clicks=[(12, 1)])
        once = CountStores()
        once.update_counts(serp, 1, 1)
        twice = CountStores()
        twice.update_counts(serp, 1, 1)
        twice.update_counts(serp, 1, 1)
        for url in serp.url_ids():
            a = np.array(once.global_store[url].as_tuple())
            b = np.array(twice.global_store[url].as_tuple())
            assert (b == 2 * a).all()

    def test_multi_click_counts_each_event(self):
        serp = make_serp(clicks=[(12, 0), (12, 2)])
        stores = CountStores()
        stores.update_counts(serp, 1, 1)
        assert stores.global_store[12].as_tuple() == (1, 0, 1, 1, 0, 0)

    def test_increment_budget_per_serp(self, rng):
        # shown grows by exactly 10; click/skip/miss events sum to 10 when
        # each url is clicked at most once
        stores = CountStores()
        for trial in range(20):
            urls = tuple(int(u) for u in rng.choice(1000, size=10, replace=False))
            clicked = rng.choice(10, size=int(rng.integers(0, 4)), replace=False)
            serp = make_serp(urls=urls, clicks=[(urls[i], int(rng.integers(3))) for i in clicked])
            before = {
                u: np.array(stores.global_store[u].as_tuple())
                if u in stores.global_store
                else np.zeros(6)
                for u in urls
            }
            stores.update_counts(serp, 1, 1)
            deltas = np.array(
                [np.array(stores.global_store[u].as_tuple()) - before[u] for u in urls]
            )
            assert deltas[:, 3].sum() == 10  # shown
            events = deltas[:, 0] + deltas[:, 1] + deltas[:, 2] + deltas[:, 4] + deltas[:, 5]
            assert events.sum() == 10


class TestExtract:
    def test_unseen_url_is_zero(self):
        stores = CountStores()
        assert (stores.extract_features(1, 1, 42) == np.zeros(FEATURE_DIM)).all()

    def test_raw_counts_after_single_event(self):
        stores = CountStores()
        serp = make_serp(urls=tuple(range(1, 11)), clicks=[(7, 2)])
        stores.update_counts(serp, session_id=3, user_id=9)
        raw = stores.extract_counts(3, 9, 7)
        expected = np.array([1, 0, 0, 1, 0, 0] * 3, dtype=float)
        assert (raw == expected).all()

    def test_transform_is_log1p(self):
        stores = CountStores()
        serp = make_serp(urls=tuple(range(1, 11)), clicks=[(7, 2)])
        stores.update_counts(serp, 3, 9)
        raw = stores.extract_counts(3, 9, 7)
        assert np.allclose(stores.extract_features(3, 9, 7), np.log1p(raw))

    def test_session_block_scoped_to_its_session(self):
        stores = CountStores()
        serp = make_serp(urls=tuple(range(1, 11)), clicks=[(7, 2)])
        stores.update_counts(serp, session_id=1, user_id=9)
        stores.update_counts(serp, session_id=2, user_id=9)
        in_first = stores.extract_counts(1, 9, 7)
        in_second = stores.extract_counts(2, 9, 7)
        # each session block sees only its own event; user/global pool both
        assert in_first[3] == in_second[3] == 1
        assert in_first[9] == in_first[15] == 2
        assert (in_first[6:] == in_second[6:]).all()

    def test_scope_nesting_single_user(self, rng):
        stores = CountStores()
        seen = set()
        for sid in range(5):
            urls = tuple(int(u) for u in rng.choice(50, size=10, replace=False))
            clicked = [urls[int(rng.integers(10))]]
            serp = make_serp(urls=urls, clicks=[(clicked[0], 1)])
            stores.update_counts(serp, session_id=sid, user_id=77)
            seen.update(urls)
        for url in seen:
            assert (
                stores.user_store[(77, url)].as_tuple()
                == stores.global_store[url].as_tuple()
            )

    def test_global_is_sum_over_users(self, rng):
        stores = CountStores()
        seen = set()
        for sid in range(12):
            user = int(rng.integers(3))
            urls = tuple(int(u) for u in rng.choice(40, size=10, replace=False))
            serp = make_serp(urls=urls, clicks=[(urls[int(rng.integers(10))], 2)])
            stores.update_counts(serp, session_id=sid, user_id=user)
            seen.update(urls)
        for url in seen:
            totals = np.zeros(6, dtype=int)
            for (user, u), counters in stores.user_store.items():
                if u == url:
                    totals += np.array(counters.as_tuple())
            assert tuple(totals) == stores.global_store[url].as_tuple()

    def test_candidate_features_shape_and_order(self):
        stores = CountStores()
        serp = make_serp(urls=tuple(range(1, 11)), clicks=[(7, 2)])
        stores.update_counts(serp, 3, 9)
        X = stores.candidate_features(3, 9, serp.url_ids())
        assert X.shape == (10, FEATURE_DIM)
        assert np.allclose(X[6], stores.extract_features(3, 9, 7))


class TestStoreLifecycle:
    def test_eviction(self):
        stores = CountStores()
        serp = make_serp(clicks=[(12, 1)])
        stores.update_counts(serp, session_id=5, user_id=2)
        stores.update_counts(serp, session_id=6, user_id=2)
        stores.evict_session(5)
        assert all(k[0] != 5 for k in stores.session_store)
        assert any(k[0] == 6 for k in stores.session_store)
        # user/global history survives
        assert stores.global_store[12].shown == 2

    def test_copy_is_independent(self):
        stores = CountStores()
        serp = make_serp(clicks=[(12, 1)])
        stores.update_counts(serp, 1, 1)
        dup = stores.copy()
        dup.update_counts(serp, 1, 1)
        assert stores.global_store[12].shown == 1
        assert dup.global_store[12].shown == 2

    def test_snapshot_round_trip(self, tmp_path):
        stores = CountStores()
        serp = make_serp(urls=tuple(range(1, 11)), clicks=[(7, 2), (3, 0)])
        stores.update_counts(serp, session_id=5, user_id=2)
        path = str(tmp_path / "counts.bin")
        stores.save(path)
        loaded = CountStores.load(path)
        assert loaded.session_store == stores.session_store
        assert loaded.user_store == stores.user_store
        assert loaded.global_store == stores.global_store

    def test_csv_export(self, tmp_path):
        stores = CountStores()
        stores.update_counts(make_serp(clicks=[(12, 1)]), 1, 1)
        path = tmp_path / "counts.csv"
        stores.to_csv(str(path))
        text = path.read_text()
        header = text.splitlines()[0]
        assert header == "scope,key1,key2,level2,level1,level0,shown,missed,skipped"
        assert len(text.splitlines()) == 1 + 10 * 3
