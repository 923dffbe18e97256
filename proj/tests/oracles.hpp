#pragma once

// Test-only brute-force oracles, independent of the library's autodiff and
// forward implementations: naive nested loops over raw parameter values.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mcg/netcore.hpp"

namespace mcg::oracles {

using net::Decoder;
using net::TokenIds;
using nn::Tensor;

// ---------------------------------------------------------------------------
// Independent forward-pass oracle for the decoder: naive loops over raw
// parameter values, no autodiff machinery shared with the implementation.

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(static_cast<std::size_t>(t.rows()),
          std::vector<double>(static_cast<std::size_t>(t.cols())));
    for (int i = 0; i < t.rows(); ++i) {
        for (int j = 0; j < t.cols(); ++j) {
            m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                t[static_cast<std::size_t>(i) * t.cols() + j];
        }
    }
    return m;
}

Mat mat_mul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t k = 0; k < b.size(); ++k) {
            for (std::size_t j = 0; j < b[0].size(); ++j) {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    return c;
}

void add_row_inplace(Mat& a, const Mat& bias) {
    for (auto& row : a) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += bias[0][j];
        }
    }
}

Mat layer_norm_oracle(const Mat& x, const Mat& g, const Mat& b) {
    Mat y = x;
    for (auto& row : y) {
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(row.size());
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(row.size());
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] = g[0][j] * (row[j] - mean) * rstd + b[0][j];
        }
    }
    return y;
}

double gelu_oracle(double x) {
    return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

// Full prefix-conditioned forward pass; returns sum log p(target_t | ...).
double decoder_logprob_oracle(Decoder& dec, const Tensor& prefix, const TokenIds& x) {
    std::map<std::string, Mat> p;
    for (auto& [name, param] : dec.named_params()) {
        p[name] = to_mat(param->value);
    }
    const auto& cfg = dec.config();
    const int d = cfg.d_model;
    const int hd = d / cfg.n_heads;
    const int plen = prefix.size() == 0 ? 0 : cfg.prefix_len;

    TokenIds ids = {dec.vocab().bos};
    ids.insert(ids.end(), x.begin(), x.end());
    const int len = static_cast<int>(ids.size());

    Mat h(static_cast<std::size_t>(len), std::vector<double>(static_cast<std::size_t>(d)));
    for (int i = 0; i < len; ++i) {
        for (int j = 0; j < d; ++j) {
            h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                p["dec.tok_emb"][static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])]
                 [static_cast<std::size_t>(j)] +
                p["dec.pos_emb"][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string bn = "dec.b" + std::to_string(l);
        // Prefix K/V rows for this layer, laid out (pos, layer, role, dim).
        Mat pk(static_cast<std::size_t>(plen), std::vector<double>(static_cast<std::size_t>(d)));
        Mat pv = pk;
        for (int i = 0; i < plen; ++i) {
            for (int j = 0; j < d; ++j) {
                pk[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                    prefix[static_cast<std::size_t>(((i * cfg.n_layers + l) * 2 + 0)) * d + j];
                pv[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                    prefix[static_cast<std::size_t>(((i * cfg.n_layers + l) * 2 + 1)) * d + j];
            }
        }
        Mat xn = layer_norm_oracle(h, p[bn + ".ln1_g"], p[bn + ".ln1_b"]);
        Mat q = mat_mul(xn, p[bn + ".wq"]);
        add_row_inplace(q, p[bn + ".bq"]);
        Mat k = mat_mul(xn, p[bn + ".wk"]);
        add_row_inplace(k, p[bn + ".bk"]);
        Mat v = mat_mul(xn, p[bn + ".wv"]);
        add_row_inplace(v, p[bn + ".bv"]);

        Mat kf = pk;
        kf.insert(kf.end(), k.begin(), k.end());
        Mat vf = pv;
        vf.insert(vf.end(), v.begin(), v.end());

        Mat ctx(static_cast<std::size_t>(len),
                std::vector<double>(static_cast<std::size_t>(d), 0.0));
        for (int head = 0; head < cfg.n_heads; ++head) {
            const int off = head * hd;
            for (int i = 0; i < len; ++i) {
                const int valid = plen + i + 1;
                std::vector<double> scores(static_cast<std::size_t>(valid));
                double mx = -1e300;
                for (int t = 0; t < valid; ++t) {
                    double s = 0.0;
                    for (int j = 0; j < hd; ++j) {
                        s += q[static_cast<std::size_t>(i)][static_cast<std::size_t>(off + j)] *
                             kf[static_cast<std::size_t>(t)][static_cast<std::size_t>(off + j)];
                    }
                    s /= std::sqrt(static_cast<double>(hd));
                    scores[static_cast<std::size_t>(t)] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (double& s : scores) {
                    s = std::exp(s - mx);
                    z += s;
                }
                for (int t = 0; t < valid; ++t) {
                    const double w = scores[static_cast<std::size_t>(t)] / z;
                    for (int j = 0; j < hd; ++j) {
                        ctx[static_cast<std::size_t>(i)][static_cast<std::size_t>(off + j)] +=
                            w * vf[static_cast<std::size_t>(t)][static_cast<std::size_t>(off + j)];
                    }
                }
            }
        }
        Mat attn_out = mat_mul(ctx, p[bn + ".wo"]);
        add_row_inplace(attn_out, p[bn + ".bo"]);
        for (int i = 0; i < len; ++i) {
            for (int j = 0; j < d; ++j) {
                h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
                    attn_out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            }
        }
        Mat x2 = layer_norm_oracle(h, p[bn + ".ln2_g"], p[bn + ".ln2_b"]);
        Mat f1 = mat_mul(x2, p[bn + ".wf1"]);
        add_row_inplace(f1, p[bn + ".bf1"]);
        for (auto& row : f1) {
            for (double& v2 : row) v2 = gelu_oracle(v2);
        }
        Mat f2 = mat_mul(f1, p[bn + ".wf2"]);
        add_row_inplace(f2, p[bn + ".bf2"]);
        for (int i = 0; i < len; ++i) {
            for (int j = 0; j < d; ++j) {
                h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
                    f2[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            }
        }
    }

    Mat hf = layer_norm_oracle(h, p["dec.lnf_g"], p["dec.lnf_b"]);
    Mat logits = mat_mul(hf, p["dec.head_w"]);
    add_row_inplace(logits, p["dec.head_b"]);

    TokenIds targets = x;
    targets.push_back(dec.vocab().eos);
    double lp = 0.0;
    for (int i = 0; i < len; ++i) {
        const auto& row = logits[static_cast<std::size_t>(i)];
        double mx = -1e300;
        for (double s : row) mx = std::max(mx, s);
        double z = 0.0;
        for (double s : row) z += std::exp(s - mx);
        lp += row[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])] - mx -
              std::log(z);
    }
    return lp;
}


// Softmax NLL of a linear probe, recomputed with plain loops.
inline double probe_nll_oracle(const std::vector<double>& v, const Mat& w, const Mat& b,
                               int target) {
    const std::size_t n = w[0].size();
    std::vector<double> logits(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
        double z = b[0][c];
        for (std::size_t j = 0; j < v.size(); ++j) {
            z += v[j] * w[j][c];
        }
        logits[c] = z;
    }
    double mx = logits[0];
    for (double s : logits) mx = std::max(mx, s);
    double zsum = 0.0;
    for (double s : logits) zsum += std::exp(s - mx);
    return -(logits[static_cast<std::size_t>(target)] - mx - std::log(zsum));
}

inline double euclid(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace mcg::oracles
