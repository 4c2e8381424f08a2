import numpy as np
import pytest

from randes import TensorMap


def make_model(rng, K=3, width=4, types=("attn.proj", "mlp.fc"), io=True, dtype=np.float32):
    entries = {}
    for k in range(1, K + 1):
        for j, t in enumerate(types):
            entries[f"blocks.{k}.{t}"] = rng.standard_normal((width, width + j))
    if io:
        entries["input.proj"] = rng.standard_normal((width, 2))
        entries["output.head"] = rng.standard_normal((2, width))
    return TensorMap(entries, dtype=dtype)


def perturb(rng, model, scale=0.1):
    return TensorMap({n: v + scale * rng.standard_normal(v.shape) for n, v in model.items()}, dtype=model[next(iter(model))].dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def suite():
    """The fixed synthetic suite: seed 42, T=8, K=4, width 32."""
    from randes.harness import generate_tasks

    return generate_tasks(seed=42, T=8)


@pytest.fixture(scope="session")
def small_suite():
    from randes.harness import Arch, TrainConfig, generate_tasks

    return generate_tasks(seed=7, T=3, arch=Arch(blocks=3, width=8), train=TrainConfig(steps=40))


# criterion number -> list of (title, ok, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{t}: {'ok' if ok else 'NOT MET'} ({d})" for t, ok, d in parts)
        terminalreporter.write_line(f"criterion {n:>2} {status}  {detail}")
