# coding: utf-8

# # Matching predictions to ground truth
#
# A detector that emits a fixed number of queries has to decide which query is
# responsible for which annotated relation before any loss can be computed.
# This walkthrough builds a tiny cost matrix by hand, solves it, and then scores
# a set of head outputs against padded targets.

# In[1]:

import numpy as np

from partsum import tensor as T
from partsum.data import RelationInstance, Vocab, pad_targets
from partsum.geometry import Box
from partsum.loss import matched_loss
from partsum.matching import brute_force_assignment, hungarian
from partsum.verify import perfect_outputs


# ## A 3 x 3 assignment
#
# Rows are queries, columns are targets. The outer product of (1, 2, 3) with
# itself rewards pairing small with large, so the optimum is the anti-diagonal.

# In[2]:

cost = np.outer([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
fast = hungarian(cost)
slow = brute_force_assignment(cost)
print(cost)
print("hungarian  :", fast.sigma, fast.total_cost)
print("brute force:", slow.sigma, slow.total_cost)


# Ties are broken the same way by both solvers (the lexicographically smallest
# optimal permutation wins), which is what lets the test-suite demand exact
# equality rather than equal cost only.

# In[3]:

tied = np.zeros((3, 3))
print(hungarian(tied).sigma, brute_force_assignment(tied).sigma)


# ## Padding targets with "no object"
#
# A scene with two relations and four queries gets two padded slots. Their
# labels are -1 internally and map to the extra last class of every head.

# In[4]:

vocab = Vocab(n_entity=3, n_predicate=2, triplets=[(0, 1, 2), (1, 0, 0)])
gt = [RelationInstance(0, Box(0.3, 0.3, 0.2, 0.2), 1, 2, Box(0.7, 0.6, 0.3, 0.4)),
      RelationInstance(1, Box(0.5, 0.4, 0.4, 0.3), 0, 0, Box(0.4, 0.7, 0.2, 0.2))]
targets = pad_targets(gt, 4, vocab)
print("subject labels:", targets.subject, "real:", targets.real)
print("predicate targets (union boxes):")
print(targets.union_box[:2])


# ## Loss of a perfect prediction
#
# Logits of +-1000 put all probability on the right class and the boxes equal
# the targets, so every negative log-likelihood and every box term vanishes.

# In[5]:

heads = dict(subject=4, object=4, predicate=3, triplet=3, subject_box=4, object_box=4, predicate_box=4,
             sum_subject=4, sum_object=4, sum_predicate=3,
             sum_subject_box=4, sum_object_box=4, sum_predicate_box=4)
outputs = perfect_outputs([targets], heads, n_layers=2)
report, assignments = matched_loss(outputs, [targets])
print("total loss:", report.value)
print("assignment per layer:", [a[0].sigma for a in assignments])


# With random head outputs the loss is positive. Shuffling the queries leaves
# it unchanged, because matching absorbs the permutation.

# In[6]:

rng = np.random.default_rng(0)
noisy = {k: T.Tensor(rng.uniform(0.2, 0.8, v.shape) if k.endswith("_box") else rng.normal(0, 2, v.shape))
         for k, v in outputs.items()}
perm = np.array([3, 1, 0, 2])
shuffled = {k: T.Tensor(v.data[:, :, perm]) for k, v in noisy.items()}
print(matched_loss(noisy, [targets])[0].value, matched_loss(shuffled, [targets])[0].value)
