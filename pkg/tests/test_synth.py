import numpy as np
import pytest

from serpbandit.clicklog import QueryAction, load_sessions
from serpbandit.errors import ConfigInvalid
from serpbandit.replay import load_truth
from serpbandit.synth import SynthConfig, generate, generate_files


def small_config(**overrides):
    base = dict(
        seed=5,
        users=2,
        days=2,
        intents=2,
        sessions_per_user_day=5,
        queries_per_session=3,
    )
    base.update(overrides)
    return SynthConfig(**base)


class TestConfig:
    def test_from_file(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(
            "# comment\n"
            "seed = 9\n"
            "users=3\n"
            "best_url_prob = 0.7  # inline comment\n"
            "\n"
        )
        config = SynthConfig.from_file(str(path))
        assert config.seed == 9
        assert config.users == 3
        assert config.best_url_prob == 0.7

    def test_seed_mandatory(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("users=3\n")
        with pytest.raises(ConfigInvalid):
            SynthConfig.from_file(str(path))

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("seed=1\nbogus=2\n")
        with pytest.raises(ConfigInvalid):
            SynthConfig.from_file(str(path))

    @pytest.mark.parametrize(
        "overrides",
        [
            {"users": 0},
            {"urls_per_intent": 5},
            {"best_url_prob": 1.5},
            {"dwell0_max": 60},  # crosses the grade-0 threshold
            {"dwell2_min": 100},
            {"grade0_frac": -0.1},
            {"terms_per_query": 50},  # exceeds vocab
        ],
    )
    def test_validation(self, overrides):
        with pytest.raises(ConfigInvalid):
            small_config(**overrides).validate()


class TestGeneration:
    def test_deterministic_byte_identical(self, tmp_path):
        config = small_config()
        paths = [
            (str(tmp_path / f"log{i}.tsv"), str(tmp_path / f"truth{i}.csv"))
            for i in (1, 2)
        ]
        for log, truth in paths:
            generate_files(config, log, truth)
        assert open(paths[0][0], "rb").read() == open(paths[1][0], "rb").read()
        assert open(paths[0][1], "rb").read() == open(paths[1][1], "rb").read()

    def test_parses_clean(self, tmp_path):
        log, truth = str(tmp_path / "log.tsv"), str(tmp_path / "truth.csv")
        counts = generate_files(small_config(), log, truth)
        sessions, stats = load_sessions(log, strict=True)
        assert stats.malformed == 0
        assert len(sessions) == counts.sessions == 2 * 2 * 5
        assert sum(len(s.serps) for s in sessions) == counts.serps

    def test_truth_alignment(self, tmp_path):
        log, truth = str(tmp_path / "log.tsv"), str(tmp_path / "truth.csv")
        counts = generate_files(small_config(), log, truth)
        rows = load_truth(truth)
        assert len(rows) == counts.serps
        for probs, intent in rows:
            assert probs.shape == (10,)
            assert intent in (0, 1)
            # anchor always sits at rank 1
            assert probs[0] == 0.2
            assert sorted(probs)[-1] == 0.5

    def test_serp_shape_invariants(self):
        config = small_config()
        for records, truth_rows in generate(config):
            queries = [r for r in records if isinstance(r, QueryAction)]
            assert len(queries) == config.queries_per_session
            for q in queries:
                urls = [u for u, _ in q.results]
                assert len(set(urls)) == 10

    def test_degenerate_probabilities_single_click(self, tmp_path):
        config = small_config(
            users=1, days=1, intents=1,
            best_url_prob=1.0, anchor_url_prob=0.0, distractor_prob=0.0,
        )
        log, truth = str(tmp_path / "log.tsv"), str(tmp_path / "truth.csv")
        counts = generate_files(config, log, truth)
        sessions, _ = load_sessions(log, strict=True)
        best_url = None
        for session in sessions:
            for serp in session.serps:
                assert len(serp.clicked_urls()) == 1
                (url,) = serp.clicked_urls()
                best_url = best_url or url
                assert url == best_url  # always the planted best url
        assert counts.clicks == counts.serps

    def test_click_rate_concentration(self, tmp_path):
        # planted probability 0.3 for the best url: empirical rate within
        # 3 binomial sigma over 1e4 serps
        config = SynthConfig(
            seed=11, users=1, days=1, intents=1, sessions_per_user_day=2500,
            queries_per_session=4, best_url_prob=0.3,
            anchor_url_prob=0.0, distractor_prob=0.0,
        )
        log, truth = str(tmp_path / "log.tsv"), str(tmp_path / "truth.csv")
        counts = generate_files(config, log, truth)
        n = counts.serps
        assert n == 10_000
        rate = counts.clicks / n
        sigma = np.sqrt(0.3 * 0.7 / n)
        assert abs(rate - 0.3) < 3 * sigma

    def test_disjoint_vocabularies_recoverable_by_lda(self, tmp_path):
        # the separability knob: disjoint per-intent term ranges make the
        # planted intent recoverable from session docs (NMI >= 0.9)
        from sklearn.metrics import normalized_mutual_info_score

        from serpbandit.topics import build_session_docs, gibbs_train

        config = SynthConfig(
            seed=404, users=3, days=2, intents=3,
            sessions_per_user_day=50, queries_per_session=3,
        )
        log, truth = str(tmp_path / "log.tsv"), str(tmp_path / "truth.csv")
        generate_files(config, log, truth)
        sessions, _ = load_sessions(log)
        docs = build_session_docs(sessions)
        rows = load_truth(truth)
        intents = []
        i = 0
        for session in sessions:
            intents.append(rows[i][1])
            i += len(session.serps)
        model = gibbs_train(docs, 3, alpha=1.0, iterations=150, seed=3)
        assigned = [model.assign(doc.terms) for doc in docs]
        assert normalized_mutual_info_score(intents, assigned) >= 0.9

    def test_dwells_recover_intended_grades(self, tmp_path):
        # dwell sampling lands inside the grade thresholds, so labeled grades
        # follow the configured distribution (up to session-final promotions)
        config = small_config(grade0_frac=1.0, grade1_frac=0.0, grade2_frac=0.0)
        log, truth = str(tmp_path / "log.tsv"), str(tmp_path / "truth.csv")
        generate_files(config, log, truth)
        sessions, _ = load_sessions(log, strict=True)
        for session in sessions:
            last_click = None
            for serp in session.serps:
                for click in serp.clicks:
                    last_click = click
            for serp in session.serps:
                for click in serp.clicks:
                    if click is last_click and click.dwell is None:
                        assert click.grade == 2
                    else:
                        assert click.grade == 0
