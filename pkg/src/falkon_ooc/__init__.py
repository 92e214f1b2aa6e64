"""Out-of-core Nystrom kernel solver with a budgeted tiled linear algebra runtime."""
from .errors import (AliasingError, BudgetError, DataFormatError, DeadlockError, DimensionMismatchError,
                     DivergenceError, FalkonError, InvalidLabelError, LossContractError,
                     NotPositiveDefiniteError, SingularTriangularError, WorkerAborted)
from .gsc import LOGISTIC, ROBUST, SQUARED, GscLoss, NewtonPath, gsc_falkon_fit, loss_eval, weighted_falkon_step
from .kernels import (KernelSpec, PrecisionPolicy, eval_kernel_block, kernel_block_sparse, kernel_vecmul_fused,
                      row_squared_norms)
from .memory import MemoryBudget, TransferLedger
from .metrics import MetricReport, compute_metric
from .preconditioner import (PreconditionerBuffer, apply_prec, build_preconditioner,
                             build_weighted_preconditioner)
from .solver import (BatchPlan, CgConfig, Dataset, FalkonModel, InducingSet, conjugate_gradient, falkon_fit,
                     linop_apply, plan_batches, predict, subsample_inducing)

__version__ = "0.1.0"
