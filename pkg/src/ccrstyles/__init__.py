"""Monte Carlo valuation of counterparty credit risk under competing structuring styles."""
from .errors import (CcrError, ConfigParse, DegeneratePool, DomainError, NonFinitePayoff,
                     NonPsdCorrelation, QuadratureFailure, SimulationError, UnsupportedStyle)
from .model import NEVER, ModelConfig, ScenarioPath, StructuringStyle, TimeGrid, validate
from .sim import (CrnResult, EstimatorStats, PathBatch, SimSettings, generate_path, mc_estimate,
                  mc_estimate_columns, mc_estimate_crn, simulate)
from .liquidity import LiquiditySpec
from .structures import (CloseoutInputs, ValuationResult, bcva, closeout_mismatch, closeout_value,
                         default_events, fair_value, ftdcva, inner_udva, pcva, pcva_gamma, ucva,
                         udva)
from .margin import (NettingSet, PoolConfig, Trade, TrancheSpec, TrancheSpread, highfreq_premium,
                     lender_fairness, netting_set_report, periodic_window_cva, repo_carry_cost,
                     simulate_pool, tranche_spread, tranche_spreads)
from .axioms import (AxiomVerdict, Verdict, VerdictMatrix, check_closeout, check_martingale,
                     check_money_conservation, check_reset_equilibrium, verdict_matrix)

__version__ = "0.1.0"
