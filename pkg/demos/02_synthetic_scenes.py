# coding: utf-8

# # Synthetic relational scenes
#
# Instead of images we generate boxes on the unit square. Spatial predicates
# such as "left of" or "in" follow from the geometry through a rule table, and
# a grid of feature tokens stands in for a backbone feature map.

# In[1]:

import numpy as np

from partsum.scenes import SceneGenConfig, generate_dataset, render_tokens, spatial_relations


# In[2]:

config = SceneGenConfig(seed=0)
ds = generate_dataset(config, 5)
scene = ds.scenes[0]
for i, e in enumerate(scene.entities):
    print(i, ds.entity_labels[e.label], tuple(round(v, 3) for v in e.box))


# Each annotated relation names two entities and one predicate:

# In[3]:

for r in scene.relations:
    s, o = scene.entities[r.subject], scene.entities[r.object]
    print(f"{ds.entity_labels[s.label]:>8} {ds.predicate_labels[r.predicate]:<9} {ds.entity_labels[o.label]}",
          sorted(spatial_relations(s.box, o.box)))


# ## Rendering tokens
#
# An 8 x 8 grid gives 64 tokens. The first channels hold per-label occupancy;
# the last eight mark box edges and their coordinates.

# In[4]:

tokens = render_tokens(scene, grid=8, n_entity_labels=ds.n_entity)
print(tokens.shape)
occupancy = tokens[:, :ds.n_entity].sum(axis=1).reshape(8, 8)
for row in occupancy:
    print("".join(" .:-=+*#%@"[min(9, int(v * 9 / max(1e-9, occupancy.max())))] for v in row))


# ## Dataset statistics
#
# Annotations keep the closest subject-object pairs, so a pair may carry more
# than one predicate. That is what makes the k = all recall setting differ
# from k = 1.

# In[5]:

big = generate_dataset(config, 200)
per_scene = [len(s.relations) for s in big.scenes]
pairs = [len({(r.subject, r.object) for r in s.relations}) for s in big.scenes]
print("relations per scene:", np.bincount(per_scene)[1:])
print("scenes with a multi-predicate pair:", sum(a < b for a, b in zip(pairs, per_scene)))
counts = np.bincount([r.predicate for s in big.scenes for r in s.relations], minlength=big.n_predicate)
print(dict(zip(big.predicate_labels, counts.tolist())))
