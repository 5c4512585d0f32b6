"""
Dependency graphs and rank groups
=================================

A question is split into subproblems; edges say which answers feed which
questions. Nodes that sit at the same depth form one rank group and are
retrieved for together.
"""

from logicrag.dag import augment_graph, build_graph, build_plan, check_acyclic

# four subproblems: p1 feeds p2 and p3, both of which feed p4
g = build_graph(
    ["Who founded X?", "Where was #1 born?", "When did #1 die?", "What links #2 and #3?"],
    [(0, 1), (0, 2), (1, 3), (2, 3)],
)
check_acyclic(g)
plan = build_plan(g)
for rank, group in enumerate(plan.rank_groups):
    print(rank, [g.node(i).text for i in group])

# a follow-up question discovered mid-run goes into a new trailing rank
g2, plan2 = augment_graph(g, plan, "Is #4 documented anywhere?", ["p4"])
print(plan2.rank_groups)
