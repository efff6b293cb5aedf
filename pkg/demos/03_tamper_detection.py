# %% [markdown]
# # Catching a dishonest provider
#
# The provider runs in test mode here, which exposes a hook that flips bits
# in a stored fragment.  The next audit names the damaged fragment, and a
# retrieve raises an integrity alarm instead of returning bad data.

# %%
import tempfile
from pathlib import Path

from cdsframe.errors import RemoteError
from cdsframe.sim import SimHarness, load_scenario, run_scenario

h = SimHarness(seed=12, workdir=Path(tempfile.mkdtemp(prefix="cds-demo-")))
client = h.new_client()
client.register("bob", "hunter2hunter2")
file_id = client.put("ledger.csv", h.data_rng.randbytes(1000))
print(client.check(file_id))

# %% [markdown]
# Flip one byte in fragment 4.

# %%
h.tamper(file_id, index=4, byte_offset=100, xor_value=0x01)
print(client.check(file_id))

# %%
try:
    client.get(file_id)
except RemoteError as exc:
    print("retrieve refused:", exc.code)

# %% [markdown]
# Reporting corruption is the system doing its job, so the customer is not
# penalised for it.

# %%
cid = h.gateway.authenticate("bob", "hunter2hunter2")
print(h.gateway.trust.get(cid).trust_degree)

# %% [markdown]
# ## The same story as a bundled scenario
# Scenario files script a run and state the expected outcome of each step.

# %%
result = run_scenario(load_scenario("tampered_fragment"))
print(result.passed)
for step, outcome in enumerate(result.outcomes):
    print(step, outcome)
