import numpy as np


def _fd_jacobian(fun, z, rel_step=1e-6):
    z = np.asarray(z, float)
    f0 = np.atleast_1d(np.asarray(fun(z), float))
    jac = np.empty((f0.size, z.size))
    for i in range(z.size):
        h = rel_step * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        jac[:, i] = (np.atleast_1d(fun(zp)) - np.atleast_1d(fun(zm))) / (2.0 * h)
    return jac


def _rel_error(supplied, reference):
    if reference.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.abs(reference))
    return float(np.max(np.abs(supplied - reference) / denom))


def check_derivatives(problem, z):
    """Compare supplied derivatives with central finite differences.

    The step for coordinate i is ``1e-6 * max(1, |z_i|)``. The error of an entry
    is ``|supplied - fd| / max(1, |fd|)``.

    Returns
    -------
    dict
        Worst relative error per block: ``gradient``, ``eq_jac``,
        ``ineq_jac`` and, if declared, ``residual_jac``.
    """
    z = np.asarray(z, float)
    report = {"gradient": _rel_error(np.asarray(problem.gradient(z), float).ravel(),
                                     _fd_jacobian(problem.objective, z).ravel())}
    if problem.eq is not None:
        report["eq_jac"] = _rel_error(problem.j_eq(z), _fd_jacobian(problem.c_eq, z))
    if problem.ineq is not None:
        report["ineq_jac"] = _rel_error(problem.j_ineq(z), _fd_jacobian(problem.c_ineq, z))
    if problem.residual is not None:
        report["residual_jac"] = _rel_error(
            np.asarray(problem.residual_jac(z), float).reshape(-1, z.size),
            _fd_jacobian(problem.residual, z))
    return report
