import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imposterid.corpus import Corpus
from imposterid.errors import ConfigError, InsufficientSpeakersError, InsufficientUtterancesError
from imposterid.nnet import init_assembly, make_adapter, mlp_forward
from imposterid.synthdata import SynthConfig, generate_corpus, split_corpus
from imposterid.training import (
    DESK_EPISODE,
    FULL_EPISODE,
    IMPOSTER,
    EpisodeConfig,
    TrainConfig,
    TrainReport,
    relation_separation,
    run_training,
    sample_episode,
    train_stage_a,
    train_stage_b,
    train_stage_c,
)


@pytest.fixture(scope="module")
def default_split():
    return split_corpus(generate_corpus(SynthConfig()), 70)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(SynthConfig(dim=6, n_speakers=12, utterances_per_speaker=6, seed=3))


def _equal_assemblies(a, b, names=("adapter", "relnet", "idn")):
    for name in names:
        for p, q in zip(getattr(a, name).params(), getattr(b, name).params()):
            if not np.array_equal(p, q):
                return False
    return True


# --- episode sampling ------------------------------------------------------------------

def test_default_episode_is_balanced():
    assert FULL_EPISODE == EpisodeConfig(80, 1, 2, 160)
    assert FULL_EPISODE.m_train * FULL_EPISODE.queries_per_speaker == FULL_EPISODE.imposter_queries
    assert DESK_EPISODE == EpisodeConfig(10, 1, 2, 20)


def test_episode_config_validation():
    with pytest.raises(ConfigError):
        EpisodeConfig(m_train=0)
    with pytest.raises(ConfigError):
        EpisodeConfig(imposter_queries=-1)


def test_episode_counts_and_purity(small_corpus):
    cfg = EpisodeConfig(4, 2, 3, 7)
    ep = sample_episode(small_corpus, cfg, np.random.default_rng(0))
    assert ep.support.shape == (4, 2, 6)
    assert ep.queries.shape == (4 * 3 + 7, 6)
    assert np.sum(ep.labels == IMPOSTER) == 7
    assert len(set(ep.support_speakers)) == 4
    for spk, lab in zip(ep.query_speakers, ep.labels):
        if lab == IMPOSTER:
            assert spk not in ep.support_speakers
        else:
            assert spk == ep.support_speakers[lab]


def test_episode_utterances_distinct_within_speaker(small_corpus):
    cfg = EpisodeConfig(3, 2, 4, 0)
    ep = sample_episode(small_corpus, cfg, np.random.default_rng(1))
    for j in range(3):
        rows = np.concatenate([ep.support[j], ep.queries[ep.labels == j]])
        assert len({r.tobytes() for r in rows}) == 6


def test_episode_without_imposters(small_corpus):
    ep = sample_episode(small_corpus, EpisodeConfig(3, 1, 2, 5), np.random.default_rng(0),
                        with_imposters=False)
    assert IMPOSTER not in ep.labels and len(ep.labels) == 6


def test_episode_determinism(small_corpus):
    cfg = EpisodeConfig(4, 1, 2, 8)
    a = sample_episode(small_corpus, cfg, np.random.default_rng(42))
    b = sample_episode(small_corpus, cfg, np.random.default_rng(42))
    np.testing.assert_array_equal(a.support, b.support)
    np.testing.assert_array_equal(a.queries, b.queries)
    assert a.query_speakers == b.query_speakers


def test_forced_imposter_speaker():
    corpus = generate_corpus(SynthConfig(dim=4, n_speakers=5, utterances_per_speaker=8))
    cfg = EpisodeConfig(4, 1, 2, 6)
    for seed in range(20):
        ep = sample_episode(corpus, cfg, np.random.default_rng(seed))
        leftover = set(corpus.speaker_ids) - set(ep.support_speakers)
        imposters = {s for s, l in zip(ep.query_speakers, ep.labels) if l == IMPOSTER}
        assert imposters == leftover and len(leftover) == 1


def test_support_frequency_is_uniform(small_corpus):
    cfg = EpisodeConfig(4, 1, 1, 0)
    rng = np.random.default_rng(7)
    n = 10_000
    counts = dict.fromkeys(small_corpus.speaker_ids, 0)
    for _ in range(n):
        for s in sample_episode(small_corpus, cfg, rng, with_imposters=False).support_speakers:
            counts[s] += 1
    p = 4 / 12
    sigma = np.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) < 5 * sigma for c in counts.values())


def test_insufficient_speakers_and_utterances():
    corpus = generate_corpus(SynthConfig(dim=4, n_speakers=4, utterances_per_speaker=3))
    with pytest.raises(InsufficientSpeakersError):
        sample_episode(corpus, EpisodeConfig(4, 1, 1, 2), np.random.default_rng(0))
    with pytest.raises(InsufficientUtterancesError):
        sample_episode(corpus, EpisodeConfig(3, 2, 2, 2), np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(0, 12))
def test_episode_purity_property(seed, m, n_imp):
    corpus = generate_corpus(SynthConfig(dim=3, n_speakers=7, utterances_per_speaker=5, seed=seed % 5))
    pool = (7 - m) * 5
    if n_imp > pool:
        with pytest.raises(InsufficientUtterancesError):
            sample_episode(corpus, EpisodeConfig(m, 1, 2, n_imp), np.random.default_rng(seed))
        n_imp = pool
    ep = sample_episode(corpus, EpisodeConfig(m, 1, 2, n_imp), np.random.default_rng(seed))
    support = set(ep.support_speakers)
    imp = [s for s, l in zip(ep.query_speakers, ep.labels) if l == IMPOSTER]
    assert len(imp) == n_imp and not support & set(imp)


# --- stage A -----------------------------------------------------------------------

def _separable_three_speakers():
    rng = np.random.default_rng(0)
    means = np.eye(5)[:3]
    speakers = {f"s{k}": means[k] + 0.05 * rng.normal(size=(30, 5)) for k in range(3)}
    return Corpus(5, speakers)


def test_stage_a_separable_accuracy():
    corpus = _separable_three_speakers()
    rng = np.random.default_rng(1)
    adapter, head, report = train_stage_a(make_adapter(5, rng), corpus, 50, rng, lr=1e-2,
                                          return_head=True)
    x = np.concatenate(list(corpus.speakers.values()))
    y = np.repeat(np.arange(3), 30)
    logits = mlp_forward(head, mlp_forward(adapter, x)[0])[0]
    assert np.mean(logits.argmax(axis=1) == y) > 0.95
    assert len(report.records) == 50


def test_stage_a_zero_epochs_is_noop(small_corpus):
    rng = np.random.default_rng(0)
    adapter = make_adapter(6, rng)
    out, report = train_stage_a(adapter, small_corpus, 0, rng)
    for p, q in zip(adapter.params(), out.params()):
        np.testing.assert_array_equal(p, q)
    assert report.records == []


def test_stage_a_loss_decreases(default_split):
    train, _ = default_split
    rng = np.random.default_rng(0)
    _, report = train_stage_a(make_adapter(train.dim, rng), train, 10, rng)
    losses = report.losses("a")
    assert losses[9] < losses[0]


# --- stage B -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def stage_b_run(default_split):
    train, _ = default_split
    asm = init_assembly(train.dim, DESK_EPISODE.m_train, 0)
    rng = np.random.default_rng([0, 1])
    asm.adapter, _ = train_stage_a(asm.adapter, train, 10, rng)
    trained, report = train_stage_b(asm, train, DESK_EPISODE, 500, rng)
    return asm, trained, report


def test_stage_b_separates_held_out_pairs(default_split, stage_b_run):
    _, test = default_split
    _, trained, _ = stage_b_run
    sep = relation_separation(trained, test, EpisodeConfig(10, 1, 2, 0), 50, np.random.default_rng(3))
    assert sep > 0.3


def test_stage_b_smoothed_loss_decreases(stage_b_run):
    _, _, report = stage_b_run
    losses = report.losses("b")
    smooth = losses[: len(losses) // 20 * 20].reshape(-1, 20).mean(axis=1)
    assert smooth[-1] < smooth[0]
    assert np.all(report.losses("b", column=3) == 0.0)


def test_stage_b_leaves_idn_and_frozen_adapter(stage_b_run, default_split):
    before, trained, _ = stage_b_run
    assert _equal_assemblies(before, trained, ("idn",))
    frozen, _ = train_stage_b(before, default_split[0], DESK_EPISODE, 5, np.random.default_rng(0),
                              freeze_adapter=True)
    assert _equal_assemblies(before, frozen, ("adapter", "idn"))
    assert not _equal_assemblies(before, frozen, ("relnet",))


# --- stage C -----------------------------------------------------------------------

def test_stage_c_frozen_contract(stage_b_run, default_split):
    _, asm, _ = stage_b_run
    out, report = train_stage_c(asm, default_split[0], DESK_EPISODE, 10, np.random.default_rng(0),
                                end_to_end=False)
    assert _equal_assemblies(asm, out, ("adapter", "relnet"))
    assert not _equal_assemblies(asm, out, ("idn",))
    assert len(report.records) == 10 and out.stage == "c"


def test_stage_c_zero_lambda_leaves_idn(stage_b_run, default_split):
    _, asm, _ = stage_b_run
    out, report = train_stage_c(asm, default_split[0], DESK_EPISODE, 10, np.random.default_rng(0), lam=0.0)
    assert _equal_assemblies(asm, out, ("idn",))
    assert not _equal_assemblies(asm, out, ("relnet",))
    np.testing.assert_array_equal(report.losses("c"), report.losses("c", column=2))


def test_stage_c_losses_finite_nonnegative(stage_b_run, default_split):
    _, asm, _ = stage_b_run
    _, report = train_stage_c(asm, default_split[0], DESK_EPISODE, 10, np.random.default_rng(0))
    for col in (2, 3, 4):
        vals = report.losses("c", column=col)
        assert np.all(np.isfinite(vals)) and np.all(vals >= 0)


# --- orchestration and reports --------------------------------------------------------

def _tiny_config(**kw):
    base = dict(episode=EpisodeConfig.balanced(4), epochs_a=2, episodes_b=5, episodes_c=5,
                relnet_hidden=(8,), idn_hidden=(8,))
    base.update(kw)
    return TrainConfig(**base)


def test_run_training_deterministic(small_corpus):
    a, ra = run_training(small_corpus, _tiny_config(), seed=5)
    b, rb = run_training(small_corpus, _tiny_config(), seed=5)
    assert ra.to_tsv() == rb.to_tsv()
    assert _equal_assemblies(a, b)
    c, _ = run_training(small_corpus, _tiny_config(), seed=6)
    assert not _equal_assemblies(a, c)


def test_run_training_resume_matches_full_run(small_corpus):
    saved = {}

    def keep(stage, asm):
        saved[stage] = asm.copy()

    full, report = run_training(small_corpus, _tiny_config(), seed=2, after_stage=keep)
    resumed, tail = run_training(small_corpus, _tiny_config(), seed=2, start="c", assembly=saved["b"])
    assert _equal_assemblies(full, resumed)
    assert [r[1] for r in report.records].count("c") == len(tail.records)


def test_run_training_rejects_bad_stage(small_corpus):
    with pytest.raises(ConfigError):
        run_training(small_corpus, _tiny_config(), 0, start="d")
    with pytest.raises(ConfigError):
        run_training(small_corpus, _tiny_config(), 0, start="b")


def test_train_report_tsv():
    report = TrainReport()
    report.add(0, "b", 0.5, 0.0, 0.5)
    report.add(1, "c", 0.25, 0.125, 0.375)
    lines = report.to_tsv().splitlines()
    assert lines[0] == "episode\tstage\tl_relation\tl_imposter\tl_total"
    assert lines[2] == "1\tc\t0.25\t0.125\t0.375"
    np.testing.assert_array_equal(report.losses(), [0.5, 0.375])
