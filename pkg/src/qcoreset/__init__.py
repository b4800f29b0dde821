"""Sampling-based coresets, low-rank approximation and clustering with
simulated quantum query accounting."""
from .errors import ContractViolation, KernelContractError, NonConvergenceError, ParseError
from .sampler import QueryLedger, halving_chain, qsample
from .framework import (SchemeConfig, WeightedSubset, iterate_sample, kp_subspace_sample, l2_coreset,
                        lp_coreset)
from .lowrank import FactoredLowRank, column_pcp, generalized_lowrank, qlowrank, qls, sampled_regression
from .kernel import KernelSpec, qlowrank_kernel, qnystrom
from .tensor import (CPFactors, CURT, bicriteria, crt_select, fpt_lowrank, lowrank_to_curt,
                     response_regression, response_span_projector, sublinear_reduction, tensor_leverage_sample)
from .clustering import (CenterSet, PartitionOracle, bicriteria_centers, estimate_cluster_sizes, estimate_sum,
                         qcluster, qdata_selection)
from .io import ingest

__version__ = "0.1.0"
