"""Score-based generative modeling with anisotropic stochastic heat equations on pixel grids.

Modules: :mod:`~asgm.grid` (fields and file formats), :mod:`~asgm.schedules`,
:mod:`~asgm.dynamics` (discretized forward operators), :mod:`~asgm.integrator`
(tamed Euler-Maruyama), :mod:`~asgm.score` and :mod:`~asgm.scorenet` (exact
and learned scores), :mod:`~asgm.reversal` (predictor-corrector sampling),
:mod:`~asgm.evaluation` and :mod:`~asgm.pipelines`.
"""
__version__ = "0.1.0"
