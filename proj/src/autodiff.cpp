#include "mcg/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace mcg::nn {

namespace {

void check(bool ok, const char* msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

}  // namespace

void softmax_row(const double* logits, double* out, int n) {
    double mx = logits[0];
    for (int j = 1; j < n; ++j) {
        mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
        out[j] = std::exp(logits[j] - mx);
        z += out[j];
    }
    for (int j = 0; j < n; ++j) {
        out[j] /= z;
    }
}

Node* Tape::alloc(std::vector<int> shape, bool requires_grad) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.val = Tensor(std::move(shape));
    if (requires_grad) {
        n.grad = Tensor(n.val.shape);
    }
    n.requires_grad = requires_grad;
    return &n;
}

Node* Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.val = std::move(value);
    if (requires_grad) {
        n.grad = Tensor(n.val.shape);
    }
    n.requires_grad = requires_grad;
    return &n;
}

Node* Tape::param(Param& p) {
    Node* n = leaf(p.value, true);
    bound_.emplace_back(&p, n);
    return n;
}

Node* Tape::frozen(const Param& p) {
    return leaf(p.value, false);
}

void Tape::harvest() {
    for (auto& [p, n] : bound_) {
        if (!n->touched) {
            continue;
        }
        for (std::size_t i = 0; i < p->grad.size(); ++i) {
            p->grad[i] += n->grad[i];
        }
    }
}

namespace {

inline void bump(Node* parent, std::size_t i, double g) {
    parent->grad[i] += g;
    parent->touched = true;
}

inline bool wants(const Node* n) { return n->requires_grad; }

}  // namespace

Node* Tape::add(Node* a, Node* b) {
    check(a->val.same_shape(b->val), "add: shape mismatch");
    Node* out = alloc(a->val.shape, wants(a) || wants(b));
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = a->val[i] + b->val[i];
    }
    out->back = [a, b](Node& o) {
        for (std::size_t i = 0; i < o.val.size(); ++i) {
            const double g = o.grad[i];
            if (wants(a)) bump(a, i, g);
            if (wants(b)) bump(b, i, g);
        }
    };
    return out;
}

Node* Tape::sub(Node* a, Node* b) {
    check(a->val.same_shape(b->val), "sub: shape mismatch");
    Node* out = alloc(a->val.shape, wants(a) || wants(b));
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = a->val[i] - b->val[i];
    }
    out->back = [a, b](Node& o) {
        for (std::size_t i = 0; i < o.val.size(); ++i) {
            const double g = o.grad[i];
            if (wants(a)) bump(a, i, g);
            if (wants(b)) bump(b, i, -g);
        }
    };
    return out;
}

Node* Tape::scale(Node* a, double c) {
    Node* out = alloc(a->val.shape, wants(a));
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = c * a->val[i];
    }
    out->back = [a, c](Node& o) {
        if (!wants(a)) return;
        for (std::size_t i = 0; i < o.val.size(); ++i) {
            bump(a, i, c * o.grad[i]);
        }
    };
    return out;
}

Node* Tape::add_bias(Node* a, Node* b) {
    const int m = a->val.rows();
    const int n = a->val.cols();
    check(static_cast<int>(b->val.size()) == n, "add_bias: bias width mismatch");
    Node* out = alloc(a->val.shape, wants(a) || wants(b));
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * n + j;
            out->val[k] = a->val[k] + b->val[static_cast<std::size_t>(j)];
        }
    }
    out->back = [a, b, m, n](Node& o) {
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * n + j;
                const double g = o.grad[k];
                if (wants(a)) bump(a, k, g);
                if (wants(b)) bump(b, static_cast<std::size_t>(j), g);
            }
        }
    };
    return out;
}

Node* Tape::matmul(Node* a, Node* b) {
    const int m = a->val.rows();
    const int k = a->val.cols();
    check(b->val.rows() == k, "matmul: inner dimension mismatch");
    const int n = b->val.cols();
    Node* out = alloc({m, n}, wants(a) || wants(b));
    gemm_nn_acc(out->val.ptr(), a->val.ptr(), b->val.ptr(), m, k, n);
    out->back = [a, b, m, k, n](Node& o) {
        if (wants(a)) {
            gemm_nt_acc(a->grad.ptr(), o.grad.ptr(), b->val.ptr(), m, n, k);
            a->touched = true;
        }
        if (wants(b)) {
            gemm_tn_acc(b->grad.ptr(), a->val.ptr(), o.grad.ptr(), k, m, n);
            b->touched = true;
        }
    };
    return out;
}

Node* Tape::matmul_nt(Node* a, Node* b) {
    const int m = a->val.rows();
    const int k = a->val.cols();
    check(b->val.cols() == k, "matmul_nt: inner dimension mismatch");
    const int n = b->val.rows();
    Node* out = alloc({m, n}, wants(a) || wants(b));
    gemm_nt_acc(out->val.ptr(), a->val.ptr(), b->val.ptr(), m, k, n);
    out->back = [a, b, m, k, n](Node& o) {
        if (wants(a)) {
            // dA[m,k] += G[m,n] * B[n,k]
            gemm_nn_acc(a->grad.ptr(), o.grad.ptr(), b->val.ptr(), m, n, k);
            a->touched = true;
        }
        if (wants(b)) {
            // dB[n,k] += G[m,n]^T * A[m,k]
            gemm_tn_acc(b->grad.ptr(), o.grad.ptr(), a->val.ptr(), n, m, k);
            b->touched = true;
        }
    };
    return out;
}

Node* Tape::tanh_(Node* a) {
    Node* out = alloc(a->val.shape, wants(a));
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        out->val[i] = std::tanh(a->val[i]);
    }
    out->back = [a](Node& o) {
        if (!wants(a)) return;
        for (std::size_t i = 0; i < o.val.size(); ++i) {
            bump(a, i, (1.0 - o.val[i] * o.val[i]) * o.grad[i]);
        }
    };
    return out;
}

Node* Tape::gelu(Node* a) {
    static constexpr double c1 = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double c2 = 0.044715;
    Node* out = alloc(a->val.shape, wants(a));
    for (std::size_t i = 0; i < out->val.size(); ++i) {
        const double x = a->val[i];
        out->val[i] = 0.5 * x * (1.0 + std::tanh(c1 * (x + c2 * x * x * x)));
    }
    out->back = [a](Node& o) {
        if (!wants(a)) return;
        for (std::size_t i = 0; i < o.val.size(); ++i) {
            const double x = a->val[i];
            const double u = c1 * (x + c2 * x * x * x);
            const double t = std::tanh(u);
            const double du = c1 * (1.0 + 3.0 * c2 * x * x);
            const double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            bump(a, i, dy * o.grad[i]);
        }
    };
    return out;
}

Node* Tape::layer_norm(Node* a, Node* gain, Node* bias, double eps) {
    const int m = a->val.rows();
    const int n = a->val.cols();
    check(static_cast<int>(gain->val.size()) == n && static_cast<int>(bias->val.size()) == n,
          "layer_norm: gain/bias width mismatch");
    Node* out = alloc(a->val.shape, wants(a) || wants(gain) || wants(bias));
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m) * 2);
    for (int i = 0; i < m; ++i) {
        const double* x = a->val.ptr() + static_cast<std::size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += x[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = x[j] - mean;
            var += d * d;
        }
        var /= n;
        const double rstd = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<std::size_t>(i) * 2] = mean;
        (*stats)[static_cast<std::size_t>(i) * 2 + 1] = rstd;
        double* y = out->val.ptr() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            y[j] = gain->val[static_cast<std::size_t>(j)] * (x[j] - mean) * rstd +
                   bias->val[static_cast<std::size_t>(j)];
        }
    }
    out->back = [a, gain, bias, m, n, stats](Node& o) {
        for (int i = 0; i < m; ++i) {
            const double mean = (*stats)[static_cast<std::size_t>(i) * 2];
            const double rstd = (*stats)[static_cast<std::size_t>(i) * 2 + 1];
            const double* x = a->val.ptr() + static_cast<std::size_t>(i) * n;
            const double* g = o.grad.ptr() + static_cast<std::size_t>(i) * n;
            double sum_gg = 0.0;   // mean of gain*g
            double sum_ggx = 0.0;  // mean of gain*g*xhat
            for (int j = 0; j < n; ++j) {
                const double xh = (x[j] - mean) * rstd;
                const double gg = gain->val[static_cast<std::size_t>(j)] * g[j];
                sum_gg += gg;
                sum_ggx += gg * xh;
                if (wants(gain)) bump(gain, static_cast<std::size_t>(j), g[j] * xh);
                if (wants(bias)) bump(bias, static_cast<std::size_t>(j), g[j]);
            }
            if (wants(a)) {
                const double mgg = sum_gg / n;
                const double mggx = sum_ggx / n;
                for (int j = 0; j < n; ++j) {
                    const double xh = (x[j] - mean) * rstd;
                    const double gg = gain->val[static_cast<std::size_t>(j)] * g[j];
                    bump(a, static_cast<std::size_t>(i) * n + j, (gg - mgg - xh * mggx) * rstd);
                }
            }
        }
    };
    return out;
}

Node* Tape::embed(Node* table, const std::vector<int>& ids) {
    const int n = table->val.cols();
    const int v = table->val.rows();
    Node* out = alloc({static_cast<int>(ids.size()), n}, wants(table));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        check(ids[i] >= 0 && ids[i] < v, "embed: id out of range");
        const double* src = table->val.ptr() + static_cast<std::size_t>(ids[i]) * n;
        double* dst = out->val.ptr() + i * n;
        for (int j = 0; j < n; ++j) dst[j] = src[j];
    }
    auto idx = std::make_shared<std::vector<int>>(ids);
    out->back = [table, idx, n](Node& o) {
        if (!wants(table)) return;
        for (std::size_t i = 0; i < idx->size(); ++i) {
            const std::size_t base = static_cast<std::size_t>((*idx)[i]) * n;
            for (int j = 0; j < n; ++j) {
                table->grad[base + j] += o.grad[i * n + j];
            }
        }
        table->touched = true;
    };
    return out;
}

Node* Tape::slice_rows(Node* a, int first, int count) {
    const int n = a->val.cols();
    check(first >= 0 && first + count <= a->val.rows(), "slice_rows: out of range");
    Node* out = alloc({count, n}, wants(a));
    for (int i = 0; i < count; ++i) {
        for (int j = 0; j < n; ++j) {
            out->val[static_cast<std::size_t>(i) * n + j] =
                a->val[static_cast<std::size_t>(first + i) * n + j];
        }
    }
    out->back = [a, first, count, n](Node& o) {
        if (!wants(a)) return;
        for (int i = 0; i < count; ++i) {
            for (int j = 0; j < n; ++j) {
                bump(a, static_cast<std::size_t>(first + i) * n + j,
                     o.grad[static_cast<std::size_t>(i) * n + j]);
            }
        }
    };
    return out;
}

Node* Tape::slice_cols(Node* a, int first, int count) {
    const int m = a->val.rows();
    const int n = a->val.cols();
    check(first >= 0 && first + count <= n, "slice_cols: out of range");
    Node* out = alloc({m, count}, wants(a));
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < count; ++j) {
            out->val[static_cast<std::size_t>(i) * count + j] =
                a->val[static_cast<std::size_t>(i) * n + first + j];
        }
    }
    out->back = [a, first, count, m, n](Node& o) {
        if (!wants(a)) return;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < count; ++j) {
                bump(a, static_cast<std::size_t>(i) * n + first + j,
                     o.grad[static_cast<std::size_t>(i) * count + j]);
            }
        }
    };
    return out;
}

Node* Tape::concat_cols(const std::vector<Node*>& parts) {
    check(!parts.empty(), "concat_cols: empty input");
    const int m = parts[0]->val.rows();
    int n = 0;
    bool req = false;
    for (Node* p : parts) {
        check(p->val.rows() == m, "concat_cols: row mismatch");
        n += p->val.cols();
        req = req || wants(p);
    }
    Node* out = alloc({m, n}, req);
    int off = 0;
    for (Node* p : parts) {
        const int w = p->val.cols();
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < w; ++j) {
                out->val[static_cast<std::size_t>(i) * n + off + j] =
                    p->val[static_cast<std::size_t>(i) * w + j];
            }
        }
        off += w;
    }
    auto ps = std::make_shared<std::vector<Node*>>(parts);
    out->back = [ps, m, n](Node& o) {
        int off2 = 0;
        for (Node* p : *ps) {
            const int w = p->val.cols();
            if (wants(p)) {
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < w; ++j) {
                        bump(p, static_cast<std::size_t>(i) * w + j,
                             o.grad[static_cast<std::size_t>(i) * n + off2 + j]);
                    }
                }
            }
            off2 += w;
        }
    };
    return out;
}

Node* Tape::concat_rows(Node* a, Node* b) {
    const int n = a->val.cols();
    check(b->val.cols() == n, "concat_rows: width mismatch");
    const int ma = a->val.rows();
    const int mb = b->val.rows();
    Node* out = alloc({ma + mb, n}, wants(a) || wants(b));
    std::copy(a->val.data.begin(), a->val.data.end(), out->val.data.begin());
    std::copy(b->val.data.begin(), b->val.data.end(),
              out->val.data.begin() + a->val.size());
    out->back = [a, b, n, ma, mb](Node& o) {
        (void)n;
        if (wants(a)) {
            for (std::size_t i = 0; i < a->val.size(); ++i) bump(a, i, o.grad[i]);
        }
        if (wants(b)) {
            const std::size_t off = a->val.size();
            for (std::size_t i = 0; i < b->val.size(); ++i) bump(b, i, o.grad[off + i]);
        }
        (void)ma;
        (void)mb;
    };
    return out;
}

Node* Tape::mean_rows(Node* a) {
    const int m = a->val.rows();
    const int n = a->val.cols();
    Node* out = alloc({1, n}, wants(a));
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out->val[static_cast<std::size_t>(j)] += a->val[static_cast<std::size_t>(i) * n + j];
        }
    }
    for (int j = 0; j < n; ++j) out->val[static_cast<std::size_t>(j)] /= m;
    out->back = [a, m, n](Node& o) {
        if (!wants(a)) return;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                bump(a, static_cast<std::size_t>(i) * n + j, o.grad[static_cast<std::size_t>(j)] / m);
            }
        }
    };
    return out;
}

Node* Tape::mean_of(const std::vector<Node*>& rows) {
    check(!rows.empty(), "mean_of: empty input");
    const auto shape = rows[0]->val.shape;
    bool req = false;
    for (Node* r : rows) {
        check(r->val.shape == shape, "mean_of: shape mismatch");
        req = req || wants(r);
    }
    Node* out = alloc(shape, req);
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (Node* r : rows) {
        for (std::size_t i = 0; i < out->val.size(); ++i) {
            out->val[i] += r->val[i] * inv;
        }
    }
    auto parents = std::make_shared<std::vector<Node*>>(rows);
    out->back = [parents, inv](Node& o) {
        for (Node* r : *parents) {
            if (!wants(r)) continue;
            for (std::size_t i = 0; i < o.val.size(); ++i) {
                bump(r, i, o.grad[i] * inv);
            }
        }
    };
    return out;
}

Node* Tape::gather(Node* a, std::vector<std::size_t> idx, std::vector<int> out_shape) {
    check(Tensor::numel(out_shape) == idx.size(), "gather: index/shape mismatch");
    Node* out = alloc(std::move(out_shape), wants(a));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] < a->val.size(), "gather: index out of range");
        out->val[i] = a->val[idx[i]];
    }
    auto map = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    out->back = [a, map](Node& o) {
        if (!wants(a)) return;
        for (std::size_t i = 0; i < map->size(); ++i) {
            bump(a, (*map)[i], o.grad[i]);
        }
    };
    return out;
}

Node* Tape::masked_softmax_rows(Node* scores, std::vector<int> valid) {
    const int m = scores->val.rows();
    const int n = scores->val.cols();
    check(static_cast<int>(valid.size()) == m, "masked_softmax_rows: valid size mismatch");
    Node* out = alloc(scores->val.shape, wants(scores));
    for (int i = 0; i < m; ++i) {
        const int v = valid[static_cast<std::size_t>(i)];
        check(v >= 1 && v <= n, "masked_softmax_rows: invalid mask length");
        softmax_row(scores->val.ptr() + static_cast<std::size_t>(i) * n,
                    out->val.ptr() + static_cast<std::size_t>(i) * n, v);
        for (int j = v; j < n; ++j) {
            out->val[static_cast<std::size_t>(i) * n + j] = 0.0;
        }
    }
    auto mask = std::make_shared<std::vector<int>>(std::move(valid));
    out->back = [scores, mask, m, n](Node& o) {
        if (!wants(scores)) return;
        for (int i = 0; i < m; ++i) {
            const int v = (*mask)[static_cast<std::size_t>(i)];
            const double* p = o.val.ptr() + static_cast<std::size_t>(i) * n;
            const double* g = o.grad.ptr() + static_cast<std::size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < v; ++j) dot += p[j] * g[j];
            for (int j = 0; j < v; ++j) {
                bump(scores, static_cast<std::size_t>(i) * n + j, p[j] * (g[j] - dot));
            }
        }
    };
    return out;
}

Node* Tape::sum_all(Node* a) {
    Node* out = alloc({1}, wants(a));
    double s = 0.0;
    for (double x : a->val.data) s += x;
    out->val[0] = s;
    out->back = [a](Node& o) {
        if (!wants(a)) return;
        for (std::size_t i = 0; i < a->val.size(); ++i) bump(a, i, o.grad[0]);
    };
    return out;
}

Node* Tape::add_scalars(const std::vector<Node*>& xs) {
    check(!xs.empty(), "add_scalars: empty input");
    bool req = false;
    double s = 0.0;
    for (Node* x : xs) {
        check(x->val.size() == 1, "add_scalars: non-scalar input");
        s += x->val[0];
        req = req || wants(x);
    }
    Node* out = alloc({1}, req);
    out->val[0] = s;
    auto parents = std::make_shared<std::vector<Node*>>(xs);
    out->back = [parents](Node& o) {
        for (Node* x : *parents) {
            if (wants(x)) bump(x, 0, o.grad[0]);
        }
    };
    return out;
}

Node* Tape::sum_sq_diff(Node* a, Node* b) {
    check(a->val.same_shape(b->val), "sum_sq_diff: shape mismatch");
    Node* out = alloc({1}, wants(a) || wants(b));
    double s = 0.0;
    for (std::size_t i = 0; i < a->val.size(); ++i) {
        const double d = a->val[i] - b->val[i];
        s += d * d;
    }
    out->val[0] = s;
    out->back = [a, b](Node& o) {
        const double g = o.grad[0];
        for (std::size_t i = 0; i < a->val.size(); ++i) {
            const double d = a->val[i] - b->val[i];
            if (wants(a)) bump(a, i, 2.0 * d * g);
            if (wants(b)) bump(b, i, -2.0 * d * g);
        }
    };
    return out;
}

Node* Tape::euclidean_hinge(Node* a, Node* b, double margin) {
    check(a->val.same_shape(b->val), "euclidean_hinge: shape mismatch");
    check(margin > 0.0, "euclidean_hinge: margin must be positive");
    Node* out = alloc({1}, wants(a) || wants(b));
    double s = 0.0;
    for (std::size_t i = 0; i < a->val.size(); ++i) {
        const double d = a->val[i] - b->val[i];
        s += d * d;
    }
    const double dist = std::sqrt(s);
    out->val[0] = std::max(dist - margin, 0.0);
    out->back = [a, b, dist, margin](Node& o) {
        if (dist <= margin || dist == 0.0) {
            return;  // hinge inactive: flat region, zero gradient
        }
        const double coef = o.grad[0] / dist;
        for (std::size_t i = 0; i < a->val.size(); ++i) {
            const double d = a->val[i] - b->val[i];
            if (wants(a)) bump(a, i, coef * d);
            if (wants(b)) bump(b, i, -coef * d);
        }
    };
    return out;
}

Node* Tape::cross_entropy_rows(Node* logits, std::vector<int> targets) {
    const int m = logits->val.rows();
    const int n = logits->val.cols();
    check(static_cast<int>(targets.size()) == m, "cross_entropy_rows: target count mismatch");
    Node* out = alloc({1}, wants(logits));
    auto probs = std::make_shared<Tensor>(logits->val.shape);
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        check(t >= 0 && t < n, "cross_entropy_rows: target out of range");
        const double* x = logits->val.ptr() + static_cast<std::size_t>(i) * n;
        double* p = probs->ptr() + static_cast<std::size_t>(i) * n;
        softmax_row(x, p, n);
        loss -= std::log(std::max(p[t], 1e-300));
    }
    out->val[0] = loss;
    auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
    out->back = [logits, probs, tgt, m, n](Node& o) {
        if (!wants(logits)) return;
        const double g = o.grad[0];
        for (int i = 0; i < m; ++i) {
            const int t = (*tgt)[static_cast<std::size_t>(i)];
            const double* p = probs->ptr() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                bump(logits, static_cast<std::size_t>(i) * n + j,
                     g * (p[j] - (j == t ? 1.0 : 0.0)));
            }
        }
    };
    return out;
}

void Tape::backward(Node* root) {
    check(root->val.size() == 1, "backward: root must be scalar");
    check(root->requires_grad, "backward: root does not require grad");
    root->grad[0] = 1.0;
    root->touched = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = *it;
        if (n.requires_grad && n.touched && n.back) {
            n.back(n);
        }
    }
}

}  // namespace mcg::nn
