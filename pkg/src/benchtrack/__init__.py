"""Benchmark-tracking portfolios under capital injection.

Subpackages:
    model     closed-form classical and entropy-regularised solutions
    sde       reflected-diffusion environment simulator and Skorokhod oracle
    qlearn    offline continuous-time q-learning and martingale diagnostics
    baseline  GBM maximum-likelihood estimation and the classical strategy
    backtest  price-series ingestion and injection-cost backtesting
    cli       config-driven command-line pipeline
"""

from . import backtest, baseline, model, qlearn, sde

__all__ = ["model", "sde", "qlearn", "baseline", "backtest"]
__version__ = "0.1.0"
