"""Shared fixtures: tiny deterministic panels shaped like loader output."""

import numpy as np
import pandas as pd
import pytest

from tailrisk.panel import PanelDataset
from tailrisk.simulate import DgpSpec, generate_panel, prepare_pipeline


def month_range(start: str, n: int) -> pd.PeriodIndex:
    return pd.period_range(start=start, periods=n, freq="M")


def toy_panel(n_firms=6, n_months=30, seed=7, with_sigma=True) -> PanelDataset:
    """Hand-rolled monthly panel, all loader columns present, no missings."""
    rng = np.random.default_rng(seed)
    months = month_range("2015-01", n_months)
    rows = []
    sectors = ["FIN", "TEC", "UTL"]
    for i in range(n_firms):
        at = np.exp(rng.normal(6.0, 0.5))
        for t, m in enumerate(months):
            rows.append(
                {
                    "firm_id": f"F{i:03d}",
                    "month": m,
                    "ret": float(rng.normal(0.01, 0.05)),
                    "volume_usd": float(np.exp(rng.normal(15.0, 0.8))),
                    "esg": float(rng.normal(0.0, 1.0)),
                    "sector": sectors[i % len(sectors)],
                    "e_score": float(rng.normal(0.0, 1.0)),
                    "s_score": float(rng.normal(0.0, 1.0)),
                    "g_score": float(rng.normal(0.0, 1.0)),
                    "at": at,
                    "dltt": at * float(rng.uniform(0.1, 0.5)),
                    "ib": at * float(rng.normal(0.05, 0.02)),
                    "capx": at * float(rng.uniform(0.02, 0.10)),
                    "ppent": at * float(rng.uniform(0.2, 0.6)),
                    "sigma": float(rng.uniform(0.01, 0.20)),
                }
            )
    frame = pd.DataFrame(rows)
    if not with_sigma:
        frame = frame.drop(columns=["sigma"])
    schema = {c: "base" for c in frame.columns}
    return PanelDataset(frame=frame, schema=schema)


@pytest.fixture(scope="session")
def small_sim_panel():
    """Generated panel, loader schema, 50 firms x 60 months."""
    spec = DgpSpec(n_firms=50, n_months=60, theta_stress=-0.5, theta_nonstress=0.0)
    panel, truth = generate_panel(spec, seed=321)
    return panel, truth


@pytest.fixture(scope="session")
def prepared_sim(small_sim_panel):
    """The same panel pushed through the standard preparation chain."""
    panel, truth = small_sim_panel
    prepped, regime = prepare_pipeline(panel)
    return prepped, regime, truth
