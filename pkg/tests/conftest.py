import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    def _record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    from passrank.desk import write_synthetic
    from passrank.synthetic import SyntheticSpec

    d = tmp_path_factory.mktemp("small")
    coll = write_synthetic(d, SyntheticSpec(n_queries=10, background_docs=20, seed=5))
    return d, coll


@pytest.fixture
def small_config(small_data, tmp_path):
    from passrank.crossenc import EncoderConfig, TrainConfig
    from passrank.experiment import AdaptConfig, ExperimentConfig, MetricConfig, PassageConfig

    d, _ = small_data
    return ExperimentConfig(
        str(d / "corpus.jsonl"), str(d / "topics.txt"), str(d / "qrels.txt"), str(tmp_path / "work"), seed=1,
        passage=PassageConfig(window=40, stride=20),
        encoder=EncoderConfig(num_layers=1, hidden=16, heads=2, ffn=32, max_len=48, vocab_size=300, dtype="float32"),
        train=TrainConfig(steps=15, batch=16),
        metrics=MetricConfig(perm_samples=2000),
        adaptation=AdaptConfig(pretrain=TrainConfig(steps=5, batch=16), weak=TrainConfig(steps=5, batch=16),
                               weak_queries=10),
    )
