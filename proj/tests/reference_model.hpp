#pragma once

// Straight-line scalar reimplementation of the transformer forward passes,
// written independently of the Tensor/Tape machinery (double precision, plain
// loops). Used as the oracle the production paths are checked against.

#include "padapt/adapter.hpp"
#include "padapt/backbone.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace padapt::refmodel {

using Mat = std::vector<std::vector<double>>;  // row-major

inline Mat to_mat(const Tensor& t, int64_t rows, int64_t cols) {
    Mat m(static_cast<size_t>(rows), std::vector<double>(static_cast<size_t>(cols)));
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
            m[static_cast<size_t>(r)][static_cast<size_t>(c)] = t.data()[r * cols + c];
    return m;
}

inline std::vector<double> to_vec(const Tensor& t) {
    return std::vector<double>(t.data(), t.data() + t.numel());
}

inline Mat matmul(const Mat& a, const Mat& b) {
    const size_t m = a.size(), k = b.size(), n = b[0].size();
    Mat out(m, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < m; ++i)
        for (size_t p = 0; p < k; ++p)
            for (size_t j = 0; j < n; ++j) out[i][j] += a[i][p] * b[p][j];
    return out;
}

inline Mat linear(const Mat& x, const Mat& w, const std::vector<double>* scale,
                  const std::vector<double>* bias) {
    Mat y = matmul(x, w);
    if (bias)
        for (auto& row : y)
            for (size_t j = 0; j < row.size(); ++j) row[j] += (*bias)[j];
    if (scale)
        for (auto& row : y)
            for (size_t j = 0; j < row.size(); ++j) row[j] *= (*scale)[j];
    return y;
}

inline Mat rms_norm(const Mat& x, const std::vector<double>& w, double eps) {
    Mat y = x;
    for (auto& row : y) {
        double ms = 0.0;
        for (double v : row) ms += v * v;
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(row.size()) + eps);
        for (size_t j = 0; j < row.size(); ++j) row[j] = row[j] * inv * w[j];
    }
    return y;
}

inline std::vector<double> softmax(const std::vector<double>& v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    std::vector<double> out(v.size());
    double denom = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        denom += out[i];
    }
    for (double& x : out) x /= denom;
    return out;
}

inline void rope_rows(Mat& x, int64_t head_dim, double base) {
    const size_t half = static_cast<size_t>(head_dim) / 2;
    for (size_t t = 0; t < x.size(); ++t)
        for (size_t off = 0; off + static_cast<size_t>(head_dim) <= x[t].size();
             off += static_cast<size_t>(head_dim))
            for (size_t i = 0; i < half; ++i) {
                const double theta =
                    static_cast<double>(t) *
                    std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
                const double c = std::cos(theta), s = std::sin(theta);
                const double x0 = x[t][off + 2 * i], x1 = x[t][off + 2 * i + 1];
                x[t][off + 2 * i] = x0 * c - x1 * s;
                x[t][off + 2 * i + 1] = x0 * s + x1 * c;
            }
}

struct RefAdapter {
    const AdapterState* state = nullptr;
    const std::vector<float>* features = nullptr;  // length feat_dim
    bool v1_style = false;
};

// Full forward: returns logits [seq][vocab]. When ad.state is null this is the
// unadapted base path.
inline Mat forward(const BackboneWeights& bb, const RefAdapter& ad, std::span<const int> tokens) {
    const BackboneConfig& cfg = bb.config;
    const int64_t d = cfg.d_model, hd = cfg.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const AdapterState* a = ad.state;
    const int64_t n_words = static_cast<int64_t>(tokens.size());
    const bool fused = a && ad.features && !ad.v1_style;
    const int64_t vlen = a ? a->config.visual_len : 0;

    // token embeddings (+ visual prefix)
    Mat x;
    Mat vis_tokens;
    if (a && ad.features) {
        // projection: [1,feat] x [feat, V*d] + bias -> V rows of d
        const Mat pw = to_mat(a->vis_proj_w, a->config.feat_dim, vlen * d);
        const std::vector<double> pb = to_vec(a->vis_proj_b);
        std::vector<double> flat(static_cast<size_t>(vlen * d), 0.0);
        for (int64_t i = 0; i < a->config.feat_dim; ++i)
            for (int64_t j = 0; j < vlen * d; ++j)
                flat[static_cast<size_t>(j)] += static_cast<double>((*ad.features)[static_cast<size_t>(i)]) *
                                                pw[static_cast<size_t>(i)][static_cast<size_t>(j)];
        for (int64_t j = 0; j < vlen * d; ++j) flat[static_cast<size_t>(j)] += pb[static_cast<size_t>(j)];
        for (int64_t r = 0; r < vlen; ++r)
            vis_tokens.push_back(std::vector<double>(flat.begin() + r * d, flat.begin() + (r + 1) * d));
    }
    if (fused)
        for (const auto& row : vis_tokens) x.push_back(row);
    for (int64_t t = 0; t < n_words; ++t) {
        std::vector<double> row(static_cast<size_t>(d));
        for (int64_t j = 0; j < d; ++j)
            row[static_cast<size_t>(j)] =
                bb.tok_embedding.data()[static_cast<int64_t>(tokens[static_cast<size_t>(t)]) * d + j];
        x.push_back(std::move(row));
    }

    // v1: mean projected row added to every prompt row
    std::vector<double> v1_offset;
    if (a && ad.v1_style && ad.features) {
        v1_offset.assign(static_cast<size_t>(d), 0.0);
        for (const auto& row : vis_tokens)
            for (int64_t j = 0; j < d; ++j) v1_offset[static_cast<size_t>(j)] += row[static_cast<size_t>(j)];
        for (double& v : v1_offset) v /= static_cast<double>(vlen);
    }

    const int64_t first_prompt_layer = a ? cfg.n_layers - a->config.adapted_layers : cfg.n_layers;
    for (int64_t li = 0; li < cfg.n_layers; ++li) {
        const auto& l = bb.layers[static_cast<size_t>(li)];
        const AdapterState::LayerSB* sb = a ? &a->sb[static_cast<size_t>(li)] : nullptr;
        const int64_t n_vis = (fused && li < a->config.fusion_depth) ? vlen : 0;
        const int64_t rows = static_cast<int64_t>(x.size());
        const int64_t words_here = rows - n_vis;

        const std::vector<double> attn_norm_w =
            a ? to_vec(a->attn_norm[static_cast<size_t>(li)]) : to_vec(l.attn_norm);
        Mat h = rms_norm(x, attn_norm_w, cfg.norm_eps);

        auto sv = [](const LinearSB& s) { return to_vec(s.scale); };
        auto bv = [](const LinearSB& s) { return to_vec(s.bias); };
        std::vector<double> sq, bq, sk, bk, svv, bvv, so, bo;
        if (sb) {
            sq = sv(sb->wq); bq = bv(sb->wq);
            sk = sv(sb->wk); bk = bv(sb->wk);
            svv = sv(sb->wv); bvv = bv(sb->wv);
            so = sv(sb->wo); bo = bv(sb->wo);
        }
        const Mat wq = to_mat(l.wq, d, d), wk = to_mat(l.wk, d, d), wv = to_mat(l.wv, d, d);
        Mat q = linear(h, wq, sb ? &sq : nullptr, sb ? &bq : nullptr);
        Mat k = linear(h, wk, sb ? &sk : nullptr, sb ? &bk : nullptr);
        Mat v = linear(h, wv, sb ? &svv : nullptr, sb ? &bvv : nullptr);

        // rope only on word rows, positions 0..words-1
        Mat qw(q.begin() + n_vis, q.end()), kw(k.begin() + n_vis, k.end());
        rope_rows(qw, hd, cfg.rope_base);
        rope_rows(kw, hd, cfg.rope_base);

        // prompt prefix k/v
        Mat kp, vp;
        const Tensor* gate = nullptr;
        if (a && li >= first_prompt_layer) {
            const auto& la = a->prompts[static_cast<size_t>(li - first_prompt_layer)];
            Mat prompt = to_mat(la.prompt, a->config.prompt_len, d);
            if (!v1_offset.empty())
                for (auto& row : prompt)
                    for (int64_t j = 0; j < d; ++j) row[static_cast<size_t>(j)] += v1_offset[static_cast<size_t>(j)];
            kp = linear(prompt, wk, sb ? &sk : nullptr, sb ? &bk : nullptr);
            vp = linear(prompt, wv, sb ? &svv : nullptr, sb ? &bvv : nullptr);
            gate = &la.gate;
        }
        const Tensor* vis_gate = n_vis > 0 ? &a->visual_gates[static_cast<size_t>(li)] : nullptr;

        Mat attn_out(static_cast<size_t>(rows), std::vector<double>(static_cast<size_t>(d), 0.0));
        for (int64_t head = 0; head < cfg.n_heads; ++head) {
            const size_t c0 = static_cast<size_t>(head * hd);
            auto seg = [&](const std::vector<double>& row) {
                return std::vector<double>(row.begin() + static_cast<int64_t>(c0),
                                           row.begin() + static_cast<int64_t>(c0) + hd);
            };
            // word rows
            for (int64_t t = 0; t < words_here; ++t) {
                const std::vector<double> qh = seg(qw[static_cast<size_t>(t)]);
                std::vector<double> scores;
                for (int64_t u = 0; u <= t; ++u) {
                    const std::vector<double> khu = seg(kw[static_cast<size_t>(u)]);
                    double dot = 0.0;
                    for (int64_t j = 0; j < hd; ++j) dot += qh[static_cast<size_t>(j)] * khu[static_cast<size_t>(j)];
                    scores.push_back(dot * inv_sqrt);
                }
                std::vector<double> w = softmax(scores);
                std::vector<double> out(static_cast<size_t>(hd), 0.0);
                for (int64_t u = 0; u <= t; ++u) {
                    const std::vector<double> vhu = seg(v[static_cast<size_t>(n_vis + u)]);
                    for (int64_t j = 0; j < hd; ++j) out[static_cast<size_t>(j)] += w[static_cast<size_t>(u)] * vhu[static_cast<size_t>(j)];
                }
                // gated prefix segments (visual then prompt, matching the production order)
                auto add_prefix = [&](const Mat& pk, const Mat& pv, const Tensor* gt) {
                    if (pk.empty()) return;
                    std::vector<double> ps;
                    for (const auto& prow : pk) {
                        const std::vector<double> ph = seg(prow);
                        double dot = 0.0;
                        for (int64_t j = 0; j < hd; ++j) dot += qh[static_cast<size_t>(j)] * ph[static_cast<size_t>(j)];
                        ps.push_back(dot * inv_sqrt);
                    }
                    std::vector<double> pw2 = softmax(ps);
                    const double g = gt->data()[head];
                    for (size_t r = 0; r < pv.size(); ++r) {
                        const std::vector<double> ph = seg(pv[r]);
                        for (int64_t j = 0; j < hd; ++j) out[static_cast<size_t>(j)] += g * pw2[r] * ph[static_cast<size_t>(j)];
                    }
                };
                if (n_vis > 0) {
                    Mat kvis(k.begin(), k.begin() + n_vis), vvis(v.begin(), v.begin() + n_vis);
                    add_prefix(kvis, vvis, vis_gate);
                }
                add_prefix(kp, vp, gate);
                for (int64_t j = 0; j < hd; ++j)
                    attn_out[static_cast<size_t>(n_vis + t)][c0 + static_cast<size_t>(j)] = out[static_cast<size_t>(j)];
            }
            // visual rows: causal self-attention among themselves, un-roped
            for (int64_t t = 0; t < n_vis; ++t) {
                const std::vector<double> qh = seg(q[static_cast<size_t>(t)]);
                std::vector<double> scores;
                for (int64_t u = 0; u <= t; ++u) {
                    const std::vector<double> khu = seg(k[static_cast<size_t>(u)]);
                    double dot = 0.0;
                    for (int64_t j = 0; j < hd; ++j) dot += qh[static_cast<size_t>(j)] * khu[static_cast<size_t>(j)];
                    scores.push_back(dot * inv_sqrt);
                }
                std::vector<double> w = softmax(scores);
                for (int64_t u = 0; u <= t; ++u) {
                    const std::vector<double> vhu = seg(v[static_cast<size_t>(u)]);
                    for (int64_t j = 0; j < hd; ++j)
                        attn_out[static_cast<size_t>(t)][c0 + static_cast<size_t>(j)] +=
                            w[static_cast<size_t>(u)] * vhu[static_cast<size_t>(j)];
                }
            }
        }
        std::vector<double> so2, bo2;
        Mat proj = linear(attn_out, to_mat(l.wo, d, d), sb ? &so : nullptr, sb ? &bo : nullptr);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(r)][static_cast<size_t>(j)] += proj[static_cast<size_t>(r)][static_cast<size_t>(j)];

        const std::vector<double> ffn_norm_w =
            a ? to_vec(a->ffn_norm[static_cast<size_t>(li)]) : to_vec(l.ffn_norm);
        Mat h2 = rms_norm(x, ffn_norm_w, cfg.norm_eps);
        std::vector<double> sg, bg, su, bu, sd, bd;
        if (sb) {
            sg = sv(sb->w_gate); bg = bv(sb->w_gate);
            su = sv(sb->w_up); bu = bv(sb->w_up);
            sd = sv(sb->w_down); bd = bv(sb->w_down);
        }
        Mat gatev = linear(h2, to_mat(l.w_gate, d, cfg.ffn_hidden), sb ? &sg : nullptr, sb ? &bg : nullptr);
        Mat up = linear(h2, to_mat(l.w_up, d, cfg.ffn_hidden), sb ? &su : nullptr, sb ? &bu : nullptr);
        for (size_t r = 0; r < gatev.size(); ++r)
            for (size_t j = 0; j < gatev[r].size(); ++j) {
                const double z = gatev[r][j];
                gatev[r][j] = z / (1.0 + std::exp(-z)) * up[r][j];
            }
        Mat down = linear(gatev, to_mat(l.w_down, cfg.ffn_hidden, d), sb ? &sd : nullptr, sb ? &bd : nullptr);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(r)][static_cast<size_t>(j)] += down[static_cast<size_t>(r)][static_cast<size_t>(j)];

        if (fused && li == a->config.fusion_depth - 1) x.erase(x.begin(), x.begin() + vlen);
    }

    const std::vector<double> fn = a ? to_vec(a->final_norm) : to_vec(bb.final_norm);
    Mat xf = rms_norm(x, fn, cfg.norm_eps);
    std::vector<double> sh, bh;
    if (a) {
        sh = to_vec(a->head_sb.scale);
        bh = to_vec(a->head_sb.bias);
    }
    return linear(xf, to_mat(bb.head, cfg.d_model, cfg.vocab_size), a ? &sh : nullptr,
                  a ? &bh : nullptr);
}

}  // namespace padapt::refmodel
