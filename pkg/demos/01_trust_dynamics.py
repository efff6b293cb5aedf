# %% [markdown]
# # How trust moves
#
# Every request a customer makes is scored as Positive, Wrong or Malicious.
# The score of one action is
#
#     Pa = (1 - Na / Totala) * Wa ** m
#
# where Na counts the customer's negative actions so far (this one included),
# Totala counts all of them, Wa is 1 / 0.5 / 0 and m is the security level.
# Trust is an exponential moving average of those scores.

# %%
from cdsframe.trust import ActionClass, TrustConfig, TrustState, action_value, record_action

cfg = TrustConfig()
cfg

# %% [markdown]
# A few hand-checkable values of the per-action score.

# %%
for args in [(0, 1, ActionClass.POSITIVE, 1), (1, 1, ActionClass.MALICIOUS, 1), (2, 10, ActionClass.WRONG, 2)]:
    print(args, "->", action_value(*args))

# %% [markdown]
# ## A well-behaved customer versus an attacker
# Starting from T0 = 0.5 with alpha = 0.5, one Positive action lifts trust to
# 0.75, while each Malicious action halves it.

# %%
def trace(actions):
    state = TrustState.fresh("demo", cfg)
    rows = []
    for a in actions:
        state = record_action(state, a, cfg)
        rows.append((a.value, round(state.last_pa, 4), round(state.trust_degree, 4), state.category.value))
    return rows


for row in trace([ActionClass.POSITIVE] * 4):
    print(row)
print()
for row in trace([ActionClass.MALICIOUS] * 3):
    print(row)

# %% [markdown]
# ## Mixed behaviour
# Wrong actions cost less than malicious ones but still pull the customer
# down, and Na keeps counting them, so later good behaviour earns less.

# %%
for row in trace([ActionClass.POSITIVE, ActionClass.WRONG, ActionClass.MALICIOUS, ActionClass.POSITIVE, ActionClass.POSITIVE]):
    print(row)

# %% [markdown]
# The gateway refuses to forward anything once trust drops below the
# connection threshold (0.4 by default).  A higher security level m punishes
# Wrong actions harder:

# %%
for m in (1, 2, 4):
    print(m, action_value(1, 2, ActionClass.WRONG, m))
