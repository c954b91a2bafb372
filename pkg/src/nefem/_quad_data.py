# Symmetric positive-weight Gauss-type rules on the reference triangle,
# in orbit-compact form: (orbit kind, orbit parameters, weight per point).
# Expanded weights sum to 1; orbit kinds: S3 centroid (1 pt),
# S21 (3 pts), S111 (6 pts).  Key is the polynomial exactness degree.
# PLACEHOLDER: regenerated by tools/gen_triangle_rules.py.
RULES = {
    1: [
        ("S3", (), 1.0),
    ],
    2: [
        ("S21", (0.16666666666666666,), 0.3333333333333333),
    ],
    4: [
        ("S21", (0.445948490915965,), 0.223381589678011),
        ("S21", (0.091576213509771,), 0.109951743655322),
    ],
    5: [
        ("S3", (), 0.225),
        ("S21", (0.470142064105115,), 0.132394152788506),
        ("S21", (0.101286507323456,), 0.125939180544827),
    ],
}
