"""Multinomial spatio-temporal mixed-effects modelling with MLB priors."""
from .mlb_dist import (LogitBetaParams, MlbParams, PolyaGammaParams, conditional_mlb_logkernel,
                       logit_beta_logpdf, logit_beta_sample, marginal_mlb_sample, mlb_logpdf,
                       polya_gamma_sample, verify_pg_identity)
from .model import (ChainState, CountPanel, MnStmModel, MnStmSpec, assemble_mnstm,
                    latent_to_probability, multinomial_logpmf_factored, stick_break_forward,
                    stick_break_inverse)
from .spatial_basis import (Adjacency, BasisSystem, mi_basis, mi_propagator, moran_operator,
                            solve_precision_factor, stability_analysis)

__version__ = "0.1.0"
