"""Context-preserving tensorial reconfiguration: tensor algebra, the reconfiguration
layer, a small numpy transformer that uses it, and a benchmark harness."""

from cptr.reconfig import (
    CptrConfig,
    ReconfigParams,
    cptr_apply,
    cptr_param_gradients,
    init_identity_params,
    reconfigure,
    refresh_decomposition,
)
from cptr.tensor import CPFactors, TuckerFactors, cp_als, hooi, hosvd, tucker_reconstruct

__version__ = "0.1.0"
