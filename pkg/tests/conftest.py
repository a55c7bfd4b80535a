import numpy as np
import pandas as pd
import pytest

from nmipw.data_model import ObservedDataset, PatternRegistry, VariableSchema

# cohort-shaped pattern counts keyed by mask over (preterm, hypertension, lowCD4, contHAART)
COHORT_COUNTS = {
    "1111": 4244, "0111": 194, "1011": 70, "0011": 15,
    "1101": 4363, "0101": 282, "1001": 388, "0001": 155,
}


def cohort_frame(seed=0, counts=None):
    """Binary data with exactly the cohort pattern counts (n = 9711)."""
    rng = np.random.default_rng(seed)
    rows = []
    for mask, count in {**COHORT_COUNTS, **(counts or {})}.items():
        vals = rng.integers(0, 2, size=(count, 4)).astype(float)
        vals[:, [c == "0" for c in mask]] = np.nan
        rows.append(vals)
    return pd.DataFrame(np.vstack(rows), columns=["preterm", "hypertension", "lowCD4", "contHAART"])


def random_dataset(rng, n=60, K=3, observed=((0, 1, 2), (0,), (1, 2), (0, 2)), gamma=None):
    """Small mixed-type dataset drawn from a pattern model (defaults to mild coefficients)."""
    schema = VariableSchema(tuple(f"V{i}" for i in range(K)),
                            ("binary",) + ("continuous",) * (K - 1))
    registry = PatternRegistry(K, tuple(observed))
    full = np.column_stack([rng.integers(0, 2, n).astype(float)] + [rng.normal(size=n) for _ in range(K - 1)])
    M = registry.M
    if gamma is None:
        gamma = [rng.normal(scale=0.3, size=len(registry.observed_for(c)) + 1) - 1.2 * np.eye(1, len(registry.observed_for(c)) + 1)[0]
                 for c in range(2, M + 1)]
    probs = np.zeros((n, M))
    for b, c in enumerate(range(2, M + 1)):
        x = np.column_stack([np.ones(n), full[:, list(registry.observed_for(c))]])
        probs[:, b + 1] = 1 / (1 + np.exp(-x @ gamma[b]))
    probs[:, 0] = 1 - probs[:, 1:].sum(axis=1)
    probs = np.clip(probs, 1e-9, None)
    probs /= probs.sum(axis=1, keepdims=True)
    codes = np.array([rng.choice(M, p=p) + 1 for p in probs])
    codes[:3] = 1
    codes[3:3 + M - 1] = np.arange(2, M + 1)
    values = full.copy()
    masks = registry.masks()
    values[~masks[codes - 1]] = np.nan
    return ObservedDataset(schema, codes, values, registry)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
