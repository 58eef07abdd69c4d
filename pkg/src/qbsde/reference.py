"""Reference values computed independently at high precision (mpmath, 40 digits)."""

#: Y_0 for f = 1_[0,1], xi = W_1, T = 1: u^{-1}(E[u(W_1)]).
STEP_IDENTITY_Y0 = 0.5672927057564268091584964228643

#: E[u(W_1)] for the same transform.
STEP_IDENTITY_EU = 1.054941976757826415163
