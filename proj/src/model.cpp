#include "parl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "parl/rng.hpp"

namespace parl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

// ---------------------------------------------------------------------------
// Config / mask

void ModelConfig::validate() const {
    if (vocab_size < 4)
        throw ConfigError("vocab_size must be >= 4 (ids 0..3 are reserved), got " +
                          std::to_string(vocab_size));
    if (d_model <= 0) throw ConfigError("d_model must be positive");
    if (n_layers <= 0) throw ConfigError("n_layers must be positive");
    if (n_heads <= 0) throw ConfigError("n_heads must be positive");
    if (d_ff <= 0) throw ConfigError("d_ff must be positive");
    if (max_seq_len <= 0) throw ConfigError("max_seq_len must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("d_model (" + std::to_string(d_model) +
                          ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
}

AttentionMaskSpec AttentionMaskSpec::shared_prompt(int prompt_len, std::vector<int> response_lens) {
    AttentionMaskSpec m;
    m.kind = Kind::shared_prompt;
    m.prompt_len = prompt_len;
    m.response_lens = std::move(response_lens);
    return m;
}

int AttentionMaskSpec::total_len() const {
    if (kind == Kind::causal) return 0;
    int total = prompt_len;
    for (int r : response_lens) total += r;
    return total;
}

void AttentionMaskSpec::validate(int seq_len, int max_seq_len) const {
    if (kind == Kind::causal) return;
    if (prompt_len < 1) throw ShapeError("shared_prompt mask needs prompt_len >= 1");
    if (response_lens.empty()) throw ShapeError("shared_prompt mask needs >= 1 response");
    for (int r : response_lens)
        if (r < 1) throw ShapeError("shared_prompt mask response lengths must be >= 1");
    if (total_len() != seq_len)
        throw ShapeError("shared_prompt mask covers " + std::to_string(total_len()) +
                         " tokens but sequence has " + std::to_string(seq_len));
    if (seq_len > max_seq_len)
        throw ShapeError("packed length " + std::to_string(seq_len) +
                         " exceeds max_seq_len " + std::to_string(max_seq_len));
}

// ---------------------------------------------------------------------------
// Parameter store

namespace {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

struct LayoutBuilder {
    std::vector<TensorInfo> tensors;
    std::size_t total = 0;
    void add(const std::string& name, int rows, int cols) {
        tensors.push_back({name, total, rows, cols});
        total += static_cast<std::size_t>(rows) * cols;
    }
};

LayoutBuilder build_layout(const ModelConfig& c) {
    LayoutBuilder lb;
    lb.add("tok_emb", c.vocab_size, c.d_model);
    lb.add("pos_emb", c.max_seq_len, c.d_model);
    for (int l = 0; l < c.n_layers; ++l) {
        std::string p = "layers." + std::to_string(l) + ".";
        lb.add(p + "ln1.gamma", 1, c.d_model);
        lb.add(p + "ln1.beta", 1, c.d_model);
        lb.add(p + "attn.wq", c.d_model, c.d_model);
        lb.add(p + "attn.bq", 1, c.d_model);
        lb.add(p + "attn.wk", c.d_model, c.d_model);
        lb.add(p + "attn.bk", 1, c.d_model);
        lb.add(p + "attn.wv", c.d_model, c.d_model);
        lb.add(p + "attn.bv", 1, c.d_model);
        lb.add(p + "attn.wo", c.d_model, c.d_model);
        lb.add(p + "attn.bo", 1, c.d_model);
        lb.add(p + "ln2.gamma", 1, c.d_model);
        lb.add(p + "ln2.beta", 1, c.d_model);
        lb.add(p + "ffn.w1", c.d_model, c.d_ff);
        lb.add(p + "ffn.b1", 1, c.d_ff);
        lb.add(p + "ffn.w2", c.d_ff, c.d_model);
        lb.add(p + "ffn.b2", 1, c.d_model);
    }
    lb.add("ln_f.gamma", 1, c.d_model);
    lb.add("ln_f.beta", 1, c.d_model);
    lb.add("head.w", c.d_model, c.vocab_size);
    lb.add("head.b", 1, c.vocab_size);
    return lb;
}

std::uint64_t layout_hash(const ModelConfig& c, const std::vector<TensorInfo>& layout) {
    std::uint64_t h = fnv1a(&c.vocab_size, sizeof(int));
    h = fnv1a(&c.d_model, sizeof(int), h);
    h = fnv1a(&c.n_layers, sizeof(int), h);
    h = fnv1a(&c.n_heads, sizeof(int), h);
    h = fnv1a(&c.d_ff, sizeof(int), h);
    h = fnv1a(&c.max_seq_len, sizeof(int), h);
    for (const auto& t : layout) {
        h = fnv1a(t.name.data(), t.name.size(), h);
        h = fnv1a(&t.rows, sizeof(int), h);
        h = fnv1a(&t.cols, sizeof(int), h);
    }
    return h;
}

constexpr double kInitStd = 0.08;
constexpr double kLnEps = 1e-5;

bool is_gamma_or_beta(const std::string& name) {
    return name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b1") ||
           name.ends_with(".b2") || name.ends_with(".bq") || name.ends_with(".bk") ||
           name.ends_with(".bv") || name.ends_with(".bo") || name.ends_with("head.b");
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p;
    p.cfg_ = config;
    auto lb = build_layout(config);
    p.layout_ = std::move(lb.tensors);
    p.w_.assign(lb.total, 0.0);
    p.layout_sig_ = layout_hash(config, p.layout_);
    p.init_seed_ = seed;

    Rng rng(mix_seed(seed, 0x6d6f64656cull));  // "model"
    for (const auto& t : p.layout_) {
        double* dst = p.w_.data() + t.offset;
        if (t.name.ends_with(".gamma")) {
            std::fill(dst, dst + t.size(), 1.0);
        } else if (is_gamma_or_beta(t.name)) {
            // biases and betas start at zero
        } else {
            for (std::size_t i = 0; i < t.size(); ++i) dst[i] = kInitStd * rng.normal();
        }
    }
    return p;
}

std::span<const double> ModelParams::tensor(const std::string& name) const {
    for (const auto& t : layout_)
        if (t.name == name) return {w_.data() + t.offset, t.size()};
    throw ConfigError("unknown tensor name: " + name);
}

ModelParams ModelParams::clone() const {
    ModelParams p;
    p.cfg_ = cfg_;
    p.w_ = w_;
    p.layout_ = layout_;
    p.layout_sig_ = layout_sig_;
    p.version_ = version_;
    p.init_seed_ = init_seed_;
    return p;
}

bool ModelParams::all_finite() const {
    for (double v : w_)
        if (!std::isfinite(v)) return false;
    return true;
}

void GradBuffer::accumulate(const GradBuffer& other) {
    if (other.layout_sig_ != layout_sig_ || other.g_.size() != g_.size())
        throw ShapeError("gradient buffers have incongruent layouts");
    for (std::size_t i = 0; i < g_.size(); ++i) g_[i] += other.g_[i];
    micro_step_count_ += other.micro_step_count_;
}

bool GradBuffer::all_finite() const {
    for (double v : g_)
        if (!std::isfinite(v)) return false;
    return true;
}

void ModelParams::apply_update(const GradBuffer& grads, double lr) {
    if (grads.layout_signature() != layout_sig_ || grads.flat().size() != w_.size())
        throw ShapeError("gradient layout not congruent with parameters");
    if (grads.micro_step_count() <= 0)
        throw ConfigError("apply_update requires micro_step_count > 0");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
    if (!grads.all_finite()) throw NumericError("refusing update: gradient contains NaN/Inf");

    const double scale = lr / static_cast<double>(grads.micro_step_count());
    std::span<const double> g = grads.flat();
    std::vector<double> backup = w_;
    for (std::size_t i = 0; i < w_.size(); ++i) w_[i] -= scale * g[i];
    if (!all_finite()) {
        w_ = std::move(backup);
        throw NumericError("refusing update: result would be non-finite");
    }
    ++version_;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

// Segment id per position: 0 = prompt (or whole causal sequence), k >= 1 =
// k-th packed response. Attention from i to j is allowed iff
//   seg_i == 0 : seg_j == 0 and j <= i
//   seg_i == k : seg_j == 0, or (seg_j == k and j <= i)
std::vector<int> build_segments(const AttentionMaskSpec& mask, int seq_len) {
    std::vector<int> seg(seq_len, 0);
    if (mask.kind == AttentionMaskSpec::Kind::causal) return seg;
    int idx = mask.prompt_len;
    int k = 1;
    for (int len : mask.response_lens) {
        for (int i = 0; i < len; ++i) seg[idx++] = k;
        ++k;
    }
    return seg;
}

inline bool attend_allowed(const std::vector<int>& seg, int i, int j) {
    if (seg[i] == 0) return seg[j] == 0 && j <= i;
    return seg[j] == 0 || (seg[j] == seg[i] && j <= i);
}

// Logical predecessor of position t: the position whose logits score t's
// token. -1 if t has none (t == 0 under causal).
int predecessor(const AttentionMaskSpec& mask, const std::vector<int>& seg, int t) {
    if (mask.kind == AttentionMaskSpec::Kind::causal) return t - 1;
    if (seg[t] != 0 && seg[t - 1] != seg[t]) return mask.prompt_len - 1;  // response start
    return t - 1;
}

inline double gelu(double x) { return 0.5 * x * std::erfc(-x * M_SQRT1_2); }

inline double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014326779399460599344;
    return 0.5 * std::erfc(-x * M_SQRT1_2) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

struct TensorMap {
    const double* tok_emb;
    const double* pos_emb;
    struct Layer {
        const double *ln1_g, *ln1_b;
        const double *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
        const double *ln2_g, *ln2_b;
        const double *w1, *b1, *w2, *b2;
    };
    std::vector<Layer> layers;
    const double *lnf_g, *lnf_b;
    const double *head_w, *head_b;
};

TensorMap map_tensors(const ModelParams& p) {
    TensorMap m;
    const auto& layout = p.layout();
    const double* base = p.flat().data();
    std::size_t i = 0;
    auto next = [&]() { return base + layout[i++].offset; };
    m.tok_emb = next();
    m.pos_emb = next();
    m.layers.resize(p.config().n_layers);
    for (auto& L : m.layers) {
        L.ln1_g = next(); L.ln1_b = next();
        L.wq = next(); L.bq = next();
        L.wk = next(); L.bk = next();
        L.wv = next(); L.bv = next();
        L.wo = next(); L.bo = next();
        L.ln2_g = next(); L.ln2_b = next();
        L.w1 = next(); L.b1 = next();
        L.w2 = next(); L.b2 = next();
    }
    m.lnf_g = next(); m.lnf_b = next();
    m.head_w = next(); m.head_b = next();
    return m;
}

// out[T x N] = x[T x M] * w[M x N] + b[N]
void linear(const std::vector<double>& x, int T, int M, const double* w, const double* b, int N,
            std::vector<double>& out) {
    out.assign(static_cast<std::size_t>(T) * N, 0.0);
    for (int t = 0; t < T; ++t) {
        const double* xt = x.data() + static_cast<std::size_t>(t) * M;
        double* ot = out.data() + static_cast<std::size_t>(t) * N;
        for (int midx = 0; midx < M; ++midx) {
            double xv = xt[midx];
            const double* wrow = w + static_cast<std::size_t>(midx) * N;
            for (int n = 0; n < N; ++n) ot[n] += xv * wrow[n];
        }
        for (int n = 0; n < N; ++n) ot[n] += b[n];
    }
}

// y = gamma * xhat + beta per position; stores xhat and rstd.
void layer_norm(const std::vector<double>& x, int T, int D, const double* gamma,
                const double* beta, std::vector<double>& xhat, std::vector<double>& rstd,
                std::vector<double>& y) {
    xhat.assign(static_cast<std::size_t>(T) * D, 0.0);
    rstd.assign(T, 0.0);
    y.assign(static_cast<std::size_t>(T) * D, 0.0);
    for (int t = 0; t < T; ++t) {
        const double* xt = x.data() + static_cast<std::size_t>(t) * D;
        double mean = 0.0;
        for (int d = 0; d < D; ++d) mean += xt[d];
        mean /= D;
        double var = 0.0;
        for (int d = 0; d < D; ++d) {
            double c = xt[d] - mean;
            var += c * c;
        }
        var /= D;
        double r = 1.0 / std::sqrt(var + kLnEps);
        rstd[t] = r;
        double* xh = xhat.data() + static_cast<std::size_t>(t) * D;
        double* yt = y.data() + static_cast<std::size_t>(t) * D;
        for (int d = 0; d < D; ++d) {
            xh[d] = (xt[d] - mean) * r;
            yt[d] = gamma[d] * xh[d] + beta[d];
        }
    }
}

// Backward of layer_norm: given dy, adds dgamma/dbeta and returns dx (added
// into dx_acc).
void layer_norm_backward(const std::vector<double>& dy, const std::vector<double>& xhat,
                         const std::vector<double>& rstd, int T, int D, const double* gamma,
                         double* dgamma, double* dbeta, std::vector<double>& dx_acc) {
    for (int t = 0; t < T; ++t) {
        const double* dyt = dy.data() + static_cast<std::size_t>(t) * D;
        const double* xh = xhat.data() + static_cast<std::size_t>(t) * D;
        double* dxt = dx_acc.data() + static_cast<std::size_t>(t) * D;
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int d = 0; d < D; ++d) {
            double dxhat = dyt[d] * gamma[d];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[d];
        }
        mean_dxhat /= D;
        mean_dxhat_xhat /= D;
        for (int d = 0; d < D; ++d) {
            double dxhat = dyt[d] * gamma[d];
            dxt[d] += rstd[t] * (dxhat - mean_dxhat - xh[d] * mean_dxhat_xhat);
            dgamma[d] += dyt[d] * xh[d];
            dbeta[d] += dyt[d];
        }
    }
}

}  // namespace

struct LayerCache {
    std::vector<double> x_in;                      // T x D, layer input
    std::vector<double> ln1_xhat, ln1_rstd, a;     // a = ln1 output
    std::vector<double> q, k, v;                   // T x D
    std::vector<double> attn_w;                    // H x T x T
    std::vector<double> ctx;                       // T x D (heads concatenated)
    std::vector<double> x_mid;                     // after attention residual
    std::vector<double> ln2_xhat, ln2_rstd, bnorm; // bnorm = ln2 output
    std::vector<double> ffn_pre, ffn_act;          // T x F
};

struct ForwardCache {
    const ModelParams* owner = nullptr;
    std::uint64_t params_version = 0;
    std::uint64_t forward_gen = 0;
    int T = 0;
    std::vector<TokenId> tokens;
    std::vector<int> positions;
    std::vector<int> seg;
    AttentionMaskSpec mask;
    std::vector<int> scored_positions;
    std::vector<int> pred_positions;
    std::vector<std::int32_t> scored_labels;
    std::vector<LayerCache> layers;
    std::vector<double> x_final;                   // input to final LN
    std::vector<double> lnf_xhat, lnf_rstd, hf;    // hf = final LN output
    std::vector<double> logits;                    // T x V
};

namespace {

void validate_forward_inputs(const ModelParams& params, std::span<const TokenId> tokens,
                             std::span<const int> positions, const AttentionMaskSpec& mask,
                             std::span<const std::int32_t> labels) {
    const auto& c = params.config();
    if (tokens.size() != positions.size() || (labels.data() && tokens.size() != labels.size()))
        throw ShapeError("tokens/positions/labels lengths differ");
    if (tokens.empty()) throw ShapeError("empty token sequence");
    if (static_cast<int>(tokens.size()) > c.max_seq_len)
        throw ShapeError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    for (TokenId t : tokens)
        if (t < 0 || t >= c.vocab_size)
            throw VocabError("token id " + std::to_string(t) + " outside vocab of size " +
                             std::to_string(c.vocab_size));
    for (int p : positions)
        if (p < 0 || p >= c.max_seq_len)
            throw ShapeError("position id " + std::to_string(p) + " outside [0, max_seq_len)");
    if (labels.data())
        for (std::int32_t l : labels)
            if (l != kIgnoreLabel && (l < 0 || l >= c.vocab_size))
                throw VocabError("label id " + std::to_string(l) + " outside vocab");
    mask.validate(static_cast<int>(tokens.size()), c.max_seq_len);
}

// Runs the transformer over the sequence, filling the cache. Always computes
// logits for every position.
void run_forward(const ModelParams& params, std::span<const TokenId> tokens,
                 std::span<const int> positions, const AttentionMaskSpec& mask,
                 ForwardCache& fc) {
    const auto& c = params.config();
    const TensorMap tm = map_tensors(params);
    const int T = static_cast<int>(tokens.size());
    const int D = c.d_model;
    const int H = c.n_heads;
    const int Dh = D / H;
    const int F = c.d_ff;
    const int V = c.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));

    fc.T = T;
    fc.tokens.assign(tokens.begin(), tokens.end());
    fc.positions.assign(positions.begin(), positions.end());
    fc.mask = mask;
    fc.seg = build_segments(mask, T);

    std::vector<double> x(static_cast<std::size_t>(T) * D);
    for (int t = 0; t < T; ++t) {
        const double* te = tm.tok_emb + static_cast<std::size_t>(tokens[t]) * D;
        const double* pe = tm.pos_emb + static_cast<std::size_t>(positions[t]) * D;
        double* xt = x.data() + static_cast<std::size_t>(t) * D;
        for (int d = 0; d < D; ++d) xt[d] = te[d] + pe[d];
    }

    fc.layers.assign(c.n_layers, {});
    for (int l = 0; l < c.n_layers; ++l) {
        auto& L = fc.layers[l];
        const auto& W = tm.layers[l];
        L.x_in = x;

        layer_norm(L.x_in, T, D, W.ln1_g, W.ln1_b, L.ln1_xhat, L.ln1_rstd, L.a);
        linear(L.a, T, D, W.wq, W.bq, D, L.q);
        linear(L.a, T, D, W.wk, W.bk, D, L.k);
        linear(L.a, T, D, W.wv, W.bv, D, L.v);

        L.attn_w.assign(static_cast<std::size_t>(H) * T * T, 0.0);
        L.ctx.assign(static_cast<std::size_t>(T) * D, 0.0);
        std::vector<double> scores(T);
        for (int h = 0; h < H; ++h) {
            const int hoff = h * Dh;
            double* wbase = L.attn_w.data() + static_cast<std::size_t>(h) * T * T;
            for (int i = 0; i < T; ++i) {
                const double* qi = L.q.data() + static_cast<std::size_t>(i) * D + hoff;
                double maxs = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j) {
                    if (!attend_allowed(fc.seg, i, j)) continue;
                    const double* kj = L.k.data() + static_cast<std::size_t>(j) * D + hoff;
                    double s = 0.0;
                    for (int d = 0; d < Dh; ++d) s += qi[d] * kj[d];
                    s *= scale;
                    scores[j] = s;
                    if (s > maxs) maxs = s;
                }
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    if (!attend_allowed(fc.seg, i, j)) continue;
                    denom += std::exp(scores[j] - maxs);
                }
                double* wrow = wbase + static_cast<std::size_t>(i) * T;
                double* ci = L.ctx.data() + static_cast<std::size_t>(i) * D + hoff;
                for (int j = 0; j <= i; ++j) {
                    if (!attend_allowed(fc.seg, i, j)) continue;
                    double w = std::exp(scores[j] - maxs) / denom;
                    wrow[j] = w;
                    const double* vj = L.v.data() + static_cast<std::size_t>(j) * D + hoff;
                    for (int d = 0; d < Dh; ++d) ci[d] += w * vj[d];
                }
            }
        }

        std::vector<double> attn_out;
        linear(L.ctx, T, D, W.wo, W.bo, D, attn_out);
        L.x_mid.assign(static_cast<std::size_t>(T) * D, 0.0);
        for (std::size_t i = 0; i < L.x_mid.size(); ++i) L.x_mid[i] = L.x_in[i] + attn_out[i];

        layer_norm(L.x_mid, T, D, W.ln2_g, W.ln2_b, L.ln2_xhat, L.ln2_rstd, L.bnorm);
        linear(L.bnorm, T, D, W.w1, W.b1, F, L.ffn_pre);
        L.ffn_act.assign(static_cast<std::size_t>(T) * F, 0.0);
        for (std::size_t i = 0; i < L.ffn_act.size(); ++i) L.ffn_act[i] = gelu(L.ffn_pre[i]);
        std::vector<double> ffn_out;
        linear(L.ffn_act, T, F, W.w2, W.b2, D, ffn_out);

        for (std::size_t i = 0; i < x.size(); ++i) x[i] = L.x_mid[i] + ffn_out[i];
    }

    fc.x_final = x;
    layer_norm(fc.x_final, T, D, tm.lnf_g, tm.lnf_b, fc.lnf_xhat, fc.lnf_rstd, fc.hf);
    linear(fc.hf, T, D, tm.head_w, tm.head_b, V, fc.logits);
}

double logsumexp_row(const double* row, int n) {
    double maxv = row[0];
    for (int i = 1; i < n; ++i)
        if (row[i] > maxv) maxv = row[i];
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(row[i] - maxv);
    return maxv + std::log(s);
}

}  // namespace

ForwardResult forward_logprobs(const ModelParams& params, std::span<const TokenId> tokens,
                               std::span<const int> positions, const AttentionMaskSpec& mask,
                               std::span<const std::int32_t> labels, bool want_cache) {
    validate_forward_inputs(params, tokens, positions, mask, labels);
    if (!labels.data()) throw ShapeError("forward_logprobs requires labels");

    auto fc = std::make_shared<ForwardCache>();
    run_forward(params, tokens, positions, mask, *fc);
    const int V = params.config().vocab_size;

    ForwardResult out;
    for (int t = 0; t < fc->T; ++t) {
        if (labels[t] == kIgnoreLabel) continue;
        int p = predecessor(mask, fc->seg, t);
        if (p < 0)
            throw ShapeError("position 0 has no predecessor to score its label from");
        const double* row = fc->logits.data() + static_cast<std::size_t>(p) * V;
        double lse = logsumexp_row(row, V);
        out.logprobs.push_back(row[labels[t]] - lse);
        out.scored_positions.push_back(t);
        fc->pred_positions.push_back(p);
        fc->scored_labels.push_back(labels[t]);
    }
    fc->scored_positions = out.scored_positions;

    std::uint64_t gen = params.bump_forward_generation();
    if (want_cache) {
        fc->owner = &params;
        fc->params_version = params.version();
        fc->forward_gen = gen;
        out.cache = std::move(fc);
    }
    return out;
}

std::vector<double> forward_logprob_rows(const ModelParams& params,
                                         std::span<const TokenId> tokens,
                                         std::span<const int> positions,
                                         const AttentionMaskSpec& mask) {
    validate_forward_inputs(params, tokens, positions, mask, {});
    ForwardCache fc;
    run_forward(params, tokens, positions, mask, fc);
    params.bump_forward_generation();
    const int V = params.config().vocab_size;
    std::vector<double> rows(fc.logits.size());
    for (int t = 0; t < fc.T; ++t) {
        const double* row = fc.logits.data() + static_cast<std::size_t>(t) * V;
        double lse = logsumexp_row(row, V);
        for (int v = 0; v < V; ++v) rows[static_cast<std::size_t>(t) * V + v] = row[v] - lse;
    }
    return rows;
}

GradBuffer backward(const ModelParams& params, const ForwardResult& fwd,
                    std::span<const double> upstream) {
    const ForwardCache* fc = fwd.cache.get();
    if (!fc) throw LifecycleError("backward requires a cached forward result");
    if (fc->owner != &params || fc->params_version != params.version() ||
        fc->forward_gen != params.forward_generation())
        throw LifecycleError("stale activation handle: a newer forward or update "
                             "invalidated this cache");
    if (upstream.size() != fc->scored_positions.size())
        throw ShapeError("upstream gradient count " + std::to_string(upstream.size()) +
                         " != scored position count " +
                         std::to_string(fc->scored_positions.size()));

    const auto& c = params.config();
    const TensorMap tm = map_tensors(params);
    const int T = fc->T;
    const int D = c.d_model;
    const int H = c.n_heads;
    const int Dh = D / H;
    const int F = c.d_ff;
    const int V = c.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));

    GradBuffer gb(params);
    double* gbase = gb.flat_mut().data();
    const auto& layout = params.layout();
    std::size_t li = 0;
    auto next_grad = [&]() { return gbase + layout[li++].offset; };
    double* g_tok_emb = next_grad();
    double* g_pos_emb = next_grad();
    struct LayerGrads {
        double *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
        double *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
    };
    std::vector<LayerGrads> lg(c.n_layers);
    for (auto& L : lg) {
        L.ln1_g = next_grad(); L.ln1_b = next_grad();
        L.wq = next_grad(); L.bq = next_grad();
        L.wk = next_grad(); L.bk = next_grad();
        L.wv = next_grad(); L.bv = next_grad();
        L.wo = next_grad(); L.bo = next_grad();
        L.ln2_g = next_grad(); L.ln2_b = next_grad();
        L.w1 = next_grad(); L.b1 = next_grad();
        L.w2 = next_grad(); L.b2 = next_grad();
    }
    double* g_lnf_g = next_grad();
    double* g_lnf_b = next_grad();
    double* g_head_w = next_grad();
    double* g_head_b = next_grad();

    // d(loss)/d(logits): softmax rows recomputed from cached logits.
    std::vector<double> dlogits(static_cast<std::size_t>(T) * V, 0.0);
    std::vector<double> probs(V);
    for (std::size_t s = 0; s < upstream.size(); ++s) {
        double u = upstream[s];
        if (u == 0.0) continue;
        int p = fc->pred_positions[s];
        const double* row = fc->logits.data() + static_cast<std::size_t>(p) * V;
        double lse = logsumexp_row(row, V);
        for (int v = 0; v < V; ++v) probs[v] = std::exp(row[v] - lse);
        double* drow = dlogits.data() + static_cast<std::size_t>(p) * V;
        for (int v = 0; v < V; ++v) drow[v] -= u * probs[v];
        drow[fc->scored_labels[s]] += u;
    }

    // Head: logits = hf * head_w + head_b.
    std::vector<double> dhf(static_cast<std::size_t>(T) * D, 0.0);
    for (int t = 0; t < T; ++t) {
        const double* hft = fc->hf.data() + static_cast<std::size_t>(t) * D;
        const double* dlt = dlogits.data() + static_cast<std::size_t>(t) * V;
        for (int d = 0; d < D; ++d) {
            const double* wrow = tm.head_w + static_cast<std::size_t>(d) * V;
            double* gwrow = g_head_w + static_cast<std::size_t>(d) * V;
            double acc = 0.0;
            for (int v = 0; v < V; ++v) {
                acc += dlt[v] * wrow[v];
                gwrow[v] += hft[d] * dlt[v];
            }
            dhf[static_cast<std::size_t>(t) * D + d] = acc;
        }
        for (int v = 0; v < V; ++v) g_head_b[v] += dlt[v];
    }

    // Final layer norm.
    std::vector<double> dx(static_cast<std::size_t>(T) * D, 0.0);
    layer_norm_backward(dhf, fc->lnf_xhat, fc->lnf_rstd, T, D, tm.lnf_g, g_lnf_g, g_lnf_b, dx);

    std::vector<double> dmid(static_cast<std::size_t>(T) * D);
    std::vector<double> dctx(static_cast<std::size_t>(T) * D);
    std::vector<double> da(static_cast<std::size_t>(T) * D);
    std::vector<double> dq(static_cast<std::size_t>(T) * D);
    std::vector<double> dk(static_cast<std::size_t>(T) * D);
    std::vector<double> dv(static_cast<std::size_t>(T) * D);

    for (int l = c.n_layers - 1; l >= 0; --l) {
        const auto& L = fc->layers[l];
        const auto& W = tm.layers[l];
        auto& G = lg[l];

        // x_out = x_mid + ffn(ln2(x_mid)); dx currently holds d(x_out).
        // FFN backward: ffn_out grad = dx.
        std::fill(dmid.begin(), dmid.end(), 0.0);
        std::vector<double> dact(static_cast<std::size_t>(T) * F, 0.0);
        for (int t = 0; t < T; ++t) {
            const double* dxt = dx.data() + static_cast<std::size_t>(t) * D;
            const double* act = L.ffn_act.data() + static_cast<std::size_t>(t) * F;
            double* dat = dact.data() + static_cast<std::size_t>(t) * F;
            for (int f = 0; f < F; ++f) {
                const double* w2row = W.w2 + static_cast<std::size_t>(f) * D;
                double* gw2row = G.w2 + static_cast<std::size_t>(f) * D;
                double acc = 0.0;
                for (int d = 0; d < D; ++d) {
                    acc += dxt[d] * w2row[d];
                    gw2row[d] += act[f] * dxt[d];
                }
                dat[f] = acc;
            }
            for (int d = 0; d < D; ++d) G.b2[d] += dxt[d];
        }
        std::vector<double> dbn(static_cast<std::size_t>(T) * D, 0.0);
        for (int t = 0; t < T; ++t) {
            const double* pre = L.ffn_pre.data() + static_cast<std::size_t>(t) * F;
            const double* bn = L.bnorm.data() + static_cast<std::size_t>(t) * D;
            double* dat = dact.data() + static_cast<std::size_t>(t) * F;
            double* dbnt = dbn.data() + static_cast<std::size_t>(t) * D;
            for (int f = 0; f < F; ++f) {
                double dpre = dat[f] * gelu_grad(pre[f]);
                dat[f] = dpre;  // reuse as d(ffn_pre)
                G.b1[f] += dpre;
            }
            for (int d = 0; d < D; ++d) {
                const double* w1row = W.w1 + static_cast<std::size_t>(d) * F;
                double* gw1row = G.w1 + static_cast<std::size_t>(d) * F;
                double acc = 0.0;
                for (int f = 0; f < F; ++f) {
                    acc += dat[f] * w1row[f];
                    gw1row[f] += bn[d] * dat[f];
                }
                dbnt[d] = acc;
            }
        }
        // d(x_mid) = dx (residual) + LN2 backward of dbn.
        for (std::size_t i = 0; i < dmid.size(); ++i) dmid[i] = dx[i];
        layer_norm_backward(dbn, L.ln2_xhat, L.ln2_rstd, T, D, W.ln2_g, G.ln2_g, G.ln2_b, dmid);

        // x_mid = x_in + attn_out(ctx); attn_out grad = dmid.
        std::fill(dctx.begin(), dctx.end(), 0.0);
        for (int t = 0; t < T; ++t) {
            const double* dmt = dmid.data() + static_cast<std::size_t>(t) * D;
            const double* ct = L.ctx.data() + static_cast<std::size_t>(t) * D;
            double* dct = dctx.data() + static_cast<std::size_t>(t) * D;
            for (int d = 0; d < D; ++d) {
                const double* worow = W.wo + static_cast<std::size_t>(d) * D;
                double* gworow = G.wo + static_cast<std::size_t>(d) * D;
                double acc = 0.0;
                for (int e = 0; e < D; ++e) {
                    acc += dmt[e] * worow[e];
                    gworow[e] += ct[d] * dmt[e];
                }
                dct[d] = acc;
            }
            for (int e = 0; e < D; ++e) G.bo[e] += dmt[e];
        }

        // Attention backward per head.
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> dwrow(T);
        for (int h = 0; h < H; ++h) {
            const int hoff = h * Dh;
            const double* wbase = L.attn_w.data() + static_cast<std::size_t>(h) * T * T;
            for (int i = 0; i < T; ++i) {
                const double* wrow = wbase + static_cast<std::size_t>(i) * T;
                const double* dci = dctx.data() + static_cast<std::size_t>(i) * D + hoff;
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) {
                    if (!attend_allowed(fc->seg, i, j)) continue;
                    const double* vj = L.v.data() + static_cast<std::size_t>(j) * D + hoff;
                    double dw = 0.0;
                    for (int d = 0; d < Dh; ++d) dw += dci[d] * vj[d];
                    dwrow[j] = dw;
                    dot += wrow[j] * dw;
                    double* dvj = dv.data() + static_cast<std::size_t>(j) * D + hoff;
                    for (int d = 0; d < Dh; ++d) dvj[d] += wrow[j] * dci[d];
                }
                const double* qi = L.q.data() + static_cast<std::size_t>(i) * D + hoff;
                double* dqi = dq.data() + static_cast<std::size_t>(i) * D + hoff;
                for (int j = 0; j <= i; ++j) {
                    if (!attend_allowed(fc->seg, i, j)) continue;
                    double ds = wrow[j] * (dwrow[j] - dot) * scale;
                    const double* kj = L.k.data() + static_cast<std::size_t>(j) * D + hoff;
                    double* dkj = dk.data() + static_cast<std::size_t>(j) * D + hoff;
                    for (int d = 0; d < Dh; ++d) {
                        dqi[d] += ds * kj[d];
                        dkj[d] += ds * qi[d];
                    }
                }
            }
        }

        // Q/K/V projections share input a = ln1(x_in).
        std::fill(da.begin(), da.end(), 0.0);
        for (int t = 0; t < T; ++t) {
            const double* at = L.a.data() + static_cast<std::size_t>(t) * D;
            const double* dqt = dq.data() + static_cast<std::size_t>(t) * D;
            const double* dkt = dk.data() + static_cast<std::size_t>(t) * D;
            const double* dvt = dv.data() + static_cast<std::size_t>(t) * D;
            double* dat = da.data() + static_cast<std::size_t>(t) * D;
            for (int d = 0; d < D; ++d) {
                const double* wqrow = W.wq + static_cast<std::size_t>(d) * D;
                const double* wkrow = W.wk + static_cast<std::size_t>(d) * D;
                const double* wvrow = W.wv + static_cast<std::size_t>(d) * D;
                double* gq = G.wq + static_cast<std::size_t>(d) * D;
                double* gk = G.wk + static_cast<std::size_t>(d) * D;
                double* gv = G.wv + static_cast<std::size_t>(d) * D;
                double acc = 0.0;
                for (int e = 0; e < D; ++e) {
                    acc += dqt[e] * wqrow[e] + dkt[e] * wkrow[e] + dvt[e] * wvrow[e];
                    gq[e] += at[d] * dqt[e];
                    gk[e] += at[d] * dkt[e];
                    gv[e] += at[d] * dvt[e];
                }
                dat[d] = acc;
            }
            for (int e = 0; e < D; ++e) {
                G.bq[e] += dqt[e];
                G.bk[e] += dkt[e];
                G.bv[e] += dvt[e];
            }
        }

        // d(x_in) = dmid (residual) + LN1 backward of da.
        std::fill(dx.begin(), dx.end(), 0.0);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dmid[i];
        layer_norm_backward(da, L.ln1_xhat, L.ln1_rstd, T, D, W.ln1_g, G.ln1_g, G.ln1_b, dx);
    }

    // Embeddings.
    for (int t = 0; t < T; ++t) {
        const double* dxt = dx.data() + static_cast<std::size_t>(t) * D;
        double* gte = g_tok_emb + static_cast<std::size_t>(fc->tokens[t]) * D;
        double* gpe = g_pos_emb + static_cast<std::size_t>(fc->positions[t]) * D;
        for (int d = 0; d < D; ++d) {
            gte[d] += dxt[d];
            gpe[d] += dxt[d];
        }
    }

    gb.set_micro_step_count(1);
    return gb;
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<TokenId> sample_tokens(const ModelParams& params, std::span<const TokenId> prompt,
                                   int max_new_tokens, double temperature,
                                   std::uint64_t rng_seed) {
    if (prompt.empty()) throw ShapeError("empty prompt");
    if (max_new_tokens < 0) throw ConfigError("max_new_tokens must be >= 0");
    if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
    const auto& c = params.config();
    if (static_cast<int>(prompt.size()) + max_new_tokens > c.max_seq_len)
        throw ShapeError("prompt + max_new_tokens exceeds max_seq_len");

    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    std::vector<TokenId> out;
    Rng rng(mix_seed(rng_seed, 0x73616d706c65ull));  // "sample"
    const int V = c.vocab_size;

    for (int step = 0; step < max_new_tokens; ++step) {
        std::vector<int> positions(seq.size());
        for (std::size_t i = 0; i < seq.size(); ++i) positions[i] = static_cast<int>(i);
        ForwardCache fcache;
        validate_forward_inputs(params, seq, positions, AttentionMaskSpec::causal(), {});
        run_forward(params, seq, positions, AttentionMaskSpec::causal(), fcache);
        params.bump_forward_generation();
        const double* row = fcache.logits.data() + (seq.size() - 1) * static_cast<std::size_t>(V);

        TokenId chosen = 0;
        if (temperature == 0.0) {
            double best = row[0];
            for (int v = 1; v < V; ++v)
                if (row[v] > best) {  // strict: lowest id wins ties
                    best = row[v];
                    chosen = v;
                }
        } else {
            double maxv = row[0];
            for (int v = 1; v < V; ++v) maxv = std::max(maxv, row[v]);
            double z = 0.0;
            std::vector<double> w(V);
            for (int v = 0; v < V; ++v) {
                w[v] = std::exp((row[v] - maxv) / temperature);
                z += w[v];
            }
            double target = rng.uniform() * z;
            double acc = 0.0;
            chosen = V - 1;
            for (int v = 0; v < V; ++v) {
                acc += w[v];
                if (target < acc) {
                    chosen = v;
                    break;
                }
            }
        }
        out.push_back(chosen);
        seq.push_back(chosen);
        if (chosen == kEosToken) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint io (layout documented in docs/formats.md)

namespace {

constexpr char kCkptMagic[8] = {'P', 'A', 'R', 'L', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint truncated");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCkptMagic, sizeof(kCkptMagic));
    const auto& c = params.config();
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.vocab_size));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.d_model));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.n_layers));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.n_heads));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.d_ff));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.max_seq_len));
    write_pod<std::uint64_t>(os, params.version());
    write_pod<std::uint64_t>(os, params.init_seed());
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.layout().size()));
    const double* base = params.flat().data();
    for (const auto& t : params.layout()) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rows));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.cols));
        os.write(reinterpret_cast<const char*>(base + t.offset),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw IoError("write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw IoError("bad checkpoint magic in " + path);
    ModelConfig c;
    c.vocab_size = static_cast<int>(read_pod<std::uint32_t>(is));
    c.d_model = static_cast<int>(read_pod<std::uint32_t>(is));
    c.n_layers = static_cast<int>(read_pod<std::uint32_t>(is));
    c.n_heads = static_cast<int>(read_pod<std::uint32_t>(is));
    c.d_ff = static_cast<int>(read_pod<std::uint32_t>(is));
    c.max_seq_len = static_cast<int>(read_pod<std::uint32_t>(is));
    auto version = read_pod<std::uint64_t>(is);
    auto seed = read_pod<std::uint64_t>(is);
    auto n_tensors = read_pod<std::uint32_t>(is);

    ModelParams p = ModelParams::init(c, seed);
    if (n_tensors != p.layout().size())
        throw IoError("checkpoint tensor count mismatch in " + path);
    double* base = p.flat_mut().data();
    for (const auto& t : p.layout()) {
        auto name_len = read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        auto rows = read_pod<std::uint32_t>(is);
        auto cols = read_pod<std::uint32_t>(is);
        if (!is || name != t.name || rows != static_cast<std::uint32_t>(t.rows) ||
            cols != static_cast<std::uint32_t>(t.cols))
            throw IoError("checkpoint tensor '" + name + "' does not match expected layout");
        is.read(reinterpret_cast<char*>(base + t.offset),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!is) throw IoError("checkpoint truncated in tensor " + name);
    }
    // Restore the recorded version (init() left it at 0).
    p.version_ = version;
    if (!p.all_finite()) throw NumericError("checkpoint contains non-finite values: " + path);
    return p;
}

}  // namespace parl
