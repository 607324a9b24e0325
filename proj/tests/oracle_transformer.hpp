#pragma once

// Independent reference forward pass used as an oracle: plain scalar loops
// over std::vector math, no Graph/autograd involvement. Supports overriding
// named sites with externally supplied values, which is what the path-patching
// and knockout equivalence tests need.

#include <cmath>
#include <map>
#include <tuple>
#include <vector>

#include "milab/model.hpp"

namespace milab_tests {

using Mat = std::vector<std::vector<double>>;  // rows x cols

enum class OSite { embed, q, k, v, pattern, z, result, mlp_out };

// (layer, head, site); head = -1 for embed/mlp_out.
using OKey = std::tuple<int, int, OSite>;
using OverrideMap = std::map<OKey, Mat>;

struct OracleRun {
    Mat embed;                                  // S x D
    std::vector<std::vector<Mat>> q, k, v, z;   // [layer][head] S x K
    std::vector<std::vector<Mat>> pattern;      // [layer][head] S x S
    std::vector<std::vector<Mat>> result;       // [layer][head] S x D
    std::vector<Mat> mlp_out;                   // [layer] S x D
    std::vector<Mat> resid_pre, resid_mid, resid_post;
    Mat final_ln;                               // S x D
    Mat logits;                                 // S x V
    std::vector<double> sigma;                  // S
};

inline Mat zeros_mat(int r, int c) { return Mat(size_t(r), std::vector<double>(size_t(c), 0.0)); }

inline void apply_override(const OverrideMap& ov, int layer, int head, OSite site, Mat& m) {
    auto it = ov.find({layer, head, site});
    if (it != ov.end()) m = it->second;
}

inline Mat layer_norm_rows(const Mat& x, const milab::Tensor& g, const milab::Tensor& b) {
    Mat y = x;
    int d = int(x[0].size());
    for (auto& row : y) {
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= d;
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= d;
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int j = 0; j < d; ++j) row[size_t(j)] = (row[size_t(j)] - mu) * inv * g.at(j) + b.at(j);
    }
    return y;
}

inline OracleRun oracle_forward(const milab::TransformerModel& m, const std::vector<int>& tokens,
                                const OverrideMap& ov = {}) {
    const auto& c = m.config;
    int S = int(tokens.size()), D = c.d_model, K = c.d_head, V = c.vocab_size;
    OracleRun r;

    r.embed = zeros_mat(S, D);
    for (int s = 0; s < S; ++s)
        for (int j = 0; j < D; ++j)
            r.embed[size_t(s)][size_t(j)] = m.tok_embed.at(tokens[size_t(s)], j) + m.pos_embed.at(s, j);
    apply_override(ov, -1, -1, OSite::embed, r.embed);

    r.q.resize(size_t(c.n_layers));
    r.k.resize(size_t(c.n_layers));
    r.v.resize(size_t(c.n_layers));
    r.z.resize(size_t(c.n_layers));
    r.pattern.resize(size_t(c.n_layers));
    r.result.resize(size_t(c.n_layers));

    Mat resid = r.embed;
    for (int l = 0; l < c.n_layers; ++l) {
        const auto& lw = m.layers[size_t(l)];
        r.resid_pre.push_back(resid);
        Mat x = layer_norm_rows(resid, lw.ln1_g, lw.ln1_b);
        Mat attn_sum = zeros_mat(S, D);
        for (int h = 0; h < c.n_heads; ++h) {
            const auto& wq = lw.w_q[size_t(h)];
            const auto& wk = lw.w_k[size_t(h)];
            const auto& wv = lw.w_v[size_t(h)];
            const auto& wo = lw.w_o[size_t(h)];
            Mat q = zeros_mat(S, K), k = zeros_mat(S, K), v = zeros_mat(S, K);
            for (int s = 0; s < S; ++s)
                for (int kk = 0; kk < K; ++kk) {
                    double aq = 0, ak = 0, av = 0;
                    for (int j = 0; j < D; ++j) {
                        aq += x[size_t(s)][size_t(j)] * wq.at(kk, j);
                        ak += x[size_t(s)][size_t(j)] * wk.at(kk, j);
                        av += x[size_t(s)][size_t(j)] * wv.at(kk, j);
                    }
                    q[size_t(s)][size_t(kk)] = aq;
                    k[size_t(s)][size_t(kk)] = ak;
                    v[size_t(s)][size_t(kk)] = av;
                }
            apply_override(ov, l, h, OSite::q, q);
            apply_override(ov, l, h, OSite::k, k);
            apply_override(ov, l, h, OSite::v, v);
            Mat pat = zeros_mat(S, S);
            double inv_sqrt = 1.0 / std::sqrt(double(K));
            for (int s = 0; s < S; ++s) {
                double mx = -1e300;
                std::vector<double> sc(size_t(S), -1e30);
                for (int t = 0; t <= s; ++t) {
                    double a = 0;
                    for (int kk = 0; kk < K; ++kk) a += q[size_t(s)][size_t(kk)] * k[size_t(t)][size_t(kk)];
                    sc[size_t(t)] = a * inv_sqrt;
                    mx = std::max(mx, sc[size_t(t)]);
                }
                double sum = 0;
                for (int t = 0; t < S; ++t) {
                    pat[size_t(s)][size_t(t)] = std::exp(sc[size_t(t)] - mx);
                    sum += pat[size_t(s)][size_t(t)];
                }
                for (int t = 0; t < S; ++t) pat[size_t(s)][size_t(t)] /= sum;
            }
            apply_override(ov, l, h, OSite::pattern, pat);
            Mat z = zeros_mat(S, K);
            for (int s = 0; s < S; ++s)
                for (int kk = 0; kk < K; ++kk) {
                    double a = 0;
                    for (int t = 0; t < S; ++t) a += pat[size_t(s)][size_t(t)] * v[size_t(t)][size_t(kk)];
                    z[size_t(s)][size_t(kk)] = a;
                }
            apply_override(ov, l, h, OSite::z, z);
            Mat res = zeros_mat(S, D);
            for (int s = 0; s < S; ++s)
                for (int j = 0; j < D; ++j) {
                    double a = 0;
                    for (int kk = 0; kk < K; ++kk) a += z[size_t(s)][size_t(kk)] * wo.at(kk, j);
                    res[size_t(s)][size_t(j)] = a;
                }
            apply_override(ov, l, h, OSite::result, res);
            for (int s = 0; s < S; ++s)
                for (int j = 0; j < D; ++j) attn_sum[size_t(s)][size_t(j)] += res[size_t(s)][size_t(j)];
            r.q[size_t(l)].push_back(q);
            r.k[size_t(l)].push_back(k);
            r.v[size_t(l)].push_back(v);
            r.pattern[size_t(l)].push_back(pat);
            r.z[size_t(l)].push_back(z);
            r.result[size_t(l)].push_back(res);
        }
        Mat mid = resid;
        for (int s = 0; s < S; ++s)
            for (int j = 0; j < D; ++j) mid[size_t(s)][size_t(j)] += attn_sum[size_t(s)][size_t(j)];
        r.resid_mid.push_back(mid);
        Mat x2 = layer_norm_rows(mid, lw.ln2_g, lw.ln2_b);
        int Hd = c.d_hidden();
        Mat mo = zeros_mat(S, D);
        for (int s = 0; s < S; ++s) {
            auto hid = std::vector<double>(size_t(Hd));
            for (int u = 0; u < Hd; ++u) {
                double a = lw.mlp_b_in.at(u);
                for (int j = 0; j < D; ++j) a += x2[size_t(s)][size_t(j)] * lw.mlp_w_in.at(j, u);
                hid[size_t(u)] = 0.5 * a * (1.0 + std::erf(a * 0.70710678118654752440));
            }
            for (int j = 0; j < D; ++j) {
                double a = lw.mlp_b_out.at(j);
                for (int u = 0; u < Hd; ++u) a += hid[size_t(u)] * lw.mlp_w_out.at(u, j);
                mo[size_t(s)][size_t(j)] = a;
            }
        }
        apply_override(ov, l, -1, OSite::mlp_out, mo);
        r.mlp_out.push_back(mo);
        Mat post = mid;
        for (int s = 0; s < S; ++s)
            for (int j = 0; j < D; ++j) post[size_t(s)][size_t(j)] += mo[size_t(s)][size_t(j)];
        r.resid_post.push_back(post);
        resid = post;
    }

    r.sigma.resize(size_t(S));
    r.final_ln = zeros_mat(S, D);
    for (int s = 0; s < S; ++s) {
        double mu = 0;
        for (int j = 0; j < D; ++j) mu += resid[size_t(s)][size_t(j)];
        mu /= D;
        double var = 0;
        for (int j = 0; j < D; ++j) {
            double d = resid[size_t(s)][size_t(j)] - mu;
            var += d * d;
        }
        var /= D;
        r.sigma[size_t(s)] = std::sqrt(var + 1e-5);
        for (int j = 0; j < D; ++j)
            r.final_ln[size_t(s)][size_t(j)] =
                (resid[size_t(s)][size_t(j)] - mu) / r.sigma[size_t(s)] * m.ln_f_g.at(j);
    }
    r.logits = zeros_mat(S, V);
    for (int s = 0; s < S; ++s)
        for (int t = 0; t < V; ++t) {
            double a = 0;
            for (int j = 0; j < D; ++j) a += r.final_ln[size_t(s)][size_t(j)] * m.unembed.at(j, t);
            r.logits[size_t(s)][size_t(t)] = a;
        }
    return r;
}

}  // namespace milab_tests
