# %% [markdown]
# # Positive and negative distillation on toy tensors
#
# Positive distillation pulls a student's softened distribution towards a
# teacher's. Negative distillation does the opposite between auxiliary
# branches, both on the output distribution and on the last decoder states
# after removing the component they share.

# %%
import torch

from cdl.distill import mle_loss, nd_hidden_loss, nd_pred_loss, orthogonal_reject, pd_loss, soften

torch.manual_seed(0)
mask = torch.ones(1, 4, dtype=torch.bool)
teacher_logits = torch.randn(1, 4, 6)
teacher = soften(teacher_logits)

# %% [markdown]
# ## Positive distillation
# The cross-entropy against a fixed teacher is smallest when the student
# matches it, where it equals the teacher's entropy.

# %%
entropy = -(teacher * teacher.log()).sum(-1).mean()
print(f"teacher entropy      {entropy:.4f}")
print(f"pd, random student   {pd_loss(teacher, torch.randn(1, 4, 6), mask):.4f}")
print(f"pd, student=teacher  {pd_loss(teacher, teacher_logits, mask):.4f}")

# %% [markdown]
# A few gradient steps on the student alone close the gap.

# %%
student = torch.randn(1, 4, 6, requires_grad=True)
opt = torch.optim.SGD([student], lr=1.0)
for step in range(51):
    loss = pd_loss(teacher, student, mask)
    if step % 10 == 0:
        print(f"step {step:2d}  pd {loss.item():.4f}")
    opt.zero_grad()
    loss.backward()
    opt.step()

# %% [markdown]
# ## Negative distillation on predictions
# Minimising -sum p_B log(1 - p_A) moves A's mass away from B's mass.

# %%
other = soften(torch.randn(1, 4, 6) * 3)
student = torch.randn(1, 4, 6, requires_grad=True)
opt = torch.optim.SGD([student], lr=0.5)
for step in range(41):
    p = torch.softmax(student, -1)
    overlap = (p * other).sum(-1).mean()
    loss = nd_pred_loss(other, p, mask)
    if step % 10 == 0:
        print(f"step {step:2d}  nd_pred {loss.item():.4f}  overlap {overlap.item():.4f}")
    opt.zero_grad()
    loss.backward()
    opt.step()

# %% [markdown]
# ## Orthogonal projection of hidden states
# Each position's state keeps only the part orthogonal to the other branch.

# %%
h_a = torch.tensor([[1.0, 1.0, 0.0]])
h_b = torch.tensor([[1.0, 0.0, 0.0]])
h_l = orthogonal_reject(h_a, h_b)
print("rejected state:", h_l.tolist(), " dot with h_b:", float((h_l * h_b).sum()))

# %% [markdown]
# The hidden-state term exp(-MSE) is 1 for identical states and decays as
# they separate.

# %%
hb = torch.randn(1, 4, 8)
for scale in (0.0, 0.5, 1.0, 2.0):
    hl = hb + scale * torch.randn(1, 4, 8)
    print(f"noise scale {scale:.1f}  nd_hidden {nd_hidden_loss(hl, hb, mask):.4f}")

# %%
targets = torch.tensor([[1, 2, 3, 4]])
print(f"mle of a uniform model over 6 tokens: {mle_loss(torch.zeros(1, 4, 6), targets, mask):.4f}")
