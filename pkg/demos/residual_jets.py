"""Second-order jets on the tape: the Navier-Cauchy residual of a
hand-written quadratic field, and its gradient with respect to a parameter
that scales the field."""

import numpy as np

from beamgnn import autodiff as ad
from beamgnn.physics import navier_cauchy_residual

lam, mu = 115e3, 77e3
tape = ad.Tape()
theta = tape.param("theta", np.array([0.5]))
x = np.array([[1.0, 2.0, 3.0], [0.1, -0.4, 0.7]])

# u = theta * (x^2, x*y, 0)
X = ad.Jet2.seed(tape, x[:, :1], 0)
Y = ad.Jet2.seed(tape, x[:, 1:2], 1)
ux, uy = X * X, X * Y
zero = ad.Jet2(tape.constant(np.zeros((2, 1))))
u = ad.jet_concat([ux, uy, zero])
u = ad.Jet2(ad.mul(u.v, theta), [None if g is None else ad.mul(g, theta) for g in u.g],
            [None if h is None else ad.mul(h, theta) for h in u.h])

r = navier_cauchy_residual(u, lam, mu)
print("residual at both points:\n", r.value)
print("by hand: r_x = theta*(2mu + 2(mu+lam)) + theta*(mu+lam), r_y = 0")
print("         =", 0.5 * (2 * mu + 2 * (mu + lam)) + 0.5 * (mu + lam))
loss = ad.sum_(ad.square(r))
print("d loss / d theta:", tape.gradient(loss)["theta"][0], " expected:", 2 * float((r.value ** 2).sum()) / 0.5)
