// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "evictd/autodiff.hpp"
#include "evictd/gdn.hpp"
#include "evictd/kv_cache.hpp"
#include "evictd/lte_scorer.hpp"
#include "evictd/random.hpp"
#include "evictd/rope.hpp"
#include "evictd/ste.hpp"

// Toy hybrid language model. Each layer is pre-norm residual: x += Wo * mixer(rmsnorm(x)),
// optionally followed by x += W2 * swish(W1 * rmsnorm(x)). Mixers are selected by a pattern
// string, one character per layer:
//   G  gated delta rule          L  attention with learned eviction
//   S  sliding-window attention  A  dense causal attention

namespace evictd {

enum class MixerKind : char { gdn = 'G', lte = 'L', swa = 'S', dense = 'A' };

inline MixerKind mixer_kind(char c) {
    switch (c) {
        case 'G':
            return MixerKind::gdn;
        case 'L':
            return MixerKind::lte;
        case 'S':
            return MixerKind::swa;
        case 'A':
            return MixerKind::dense;
        default:
            throw ConfigError(std::string("unknown layer kind '") + c + "' in pattern (expected G, L, S or A)");
    }
}

struct ModelConfig {
    std::string name = "toy";
    std::size_t vocab = 35;
    std::size_t heads = 2;      // query heads (and GDN heads)
    std::size_t kv_heads = 2;   // attention KV heads; the scorer has one group per KV head
    std::size_t gdn_heads = 2;
    std::size_t head_dim = 16;
    std::size_t d_model = 32;
    std::string pattern = "SL";  // SWA then LTE attention
    std::size_t mlp_mult = 2;   // 0 disables the MLP sublayer
    bool tie_embeddings = false;
    std::size_t window = 16;    // w
    std::size_t capacity = 16;  // b
    std::size_t sink = 2;       // s
    std::size_t seq_len = 96;
    double rope_base = 10000.0;
    double gdn_alpha_bias = 3.0;
    /// When true the scorer is bypassed and every token is retained (r = 1).
    bool frozen_retention = false;

    std::size_t layers() const {
        return pattern.size();
    }
    std::size_t lte_layers() const {
        return static_cast<std::size_t>(std::count(pattern.begin(), pattern.end(), 'L'));
    }

    void validate() const {
        EVICTD_CHECK(!pattern.empty(), ConfigError, "config: empty layer pattern");
        for (char c : pattern) {
            mixer_kind(c);
        }
        EVICTD_CHECK(vocab >= 2 && heads >= 1 && kv_heads >= 1 && heads % kv_heads == 0 && gdn_heads >= 1,
                     ConfigError,
                     "config: bad vocabulary or head counts");
        EVICTD_CHECK(head_dim >= 4 && head_dim % 4 == 0, ConfigError, "config: head_dim must be a positive multiple of 4");
        EVICTD_CHECK(d_model % gdn_heads == 0, ConfigError, "config: d_model must split evenly over GDN heads");
        EVICTD_CHECK(capacity >= sink,
                     ConfigError,
                     "config: capacity b=" + std::to_string(capacity) + " is smaller than the sink s=" + std::to_string(sink));
        if (lte_layers() > 0) {
            EVICTD_CHECK(window >= kReceptiveField,
                         ConfigError,
                         "config: window w=" + std::to_string(window) + " must be at least the scorer receptive field R=" +
                             std::to_string(kReceptiveField));
        }
        EVICTD_CHECK(window >= 1, ConfigError, "config: window must be >= 1");
    }

    /// Runnable models use plain multi-head attention with d_model = heads * head_dim.
    void validate_runnable() const {
        validate();
        EVICTD_CHECK(kv_heads == heads && d_model == heads * head_dim,
                     ConfigError,
                     "config: grouped-query shape presets are for counting and benchmarks only");
    }

    static ModelConfig preset(const std::string& name) {
        ModelConfig c;
        if (name == "toy") {
            return c;
        }
        if (name == "0.4b-shape") {
            c.name = name;
            c.vocab = 32000;
            c.heads = c.kv_heads = 16;
            c.gdn_heads = 8;
            c.head_dim = 64;
            c.d_model = 1024;
            c.pattern = std::string(24, 'G');
            for (std::size_t l = 1; l < 24; l += 2) {
                c.pattern[l] = 'L';
            }
            c.mlp_mult = 4;
            c.tie_embeddings = true;
            c.window = 768;
            c.capacity = 512;
            c.sink = 4;
            c.seq_len = 4096;
            return c;
        }
        if (name == "1.4b-shape") {
            c = preset("0.4b-shape");
            c.name = name;
            c.heads = 32;
            c.kv_heads = 8;
            c.head_dim = 64;
            c.d_model = 2048;
            c.tie_embeddings = false;
            return c;
        }
        throw ConfigError("unknown preset '" + name + "' (expected toy, 0.4b-shape or 1.4b-shape)");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"name", c.name},
                       {"vocab", c.vocab},
                       {"heads", c.heads},
                       {"kv_heads", c.kv_heads},
                       {"gdn_heads", c.gdn_heads},
                       {"head_dim", c.head_dim},
                       {"d_model", c.d_model},
                       {"pattern", c.pattern},
                       {"mlp_mult", c.mlp_mult},
                       {"tie_embeddings", c.tie_embeddings},
                       {"window", c.window},
                       {"capacity", c.capacity},
                       {"sink", c.sink},
                       {"seq_len", c.seq_len},
                       {"rope_base", c.rope_base},
                       {"gdn_alpha_bias", c.gdn_alpha_bias},
                       {"frozen_retention", c.frozen_retention}};
}

/// Missing keys keep the value of the preset named by "preset" (default toy).
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig::preset(j.value("preset", std::string("toy")));
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    get("name", c.name);
    get("vocab", c.vocab);
    get("heads", c.heads);
    get("kv_heads", c.kv_heads);
    get("gdn_heads", c.gdn_heads);
    get("head_dim", c.head_dim);
    get("d_model", c.d_model);
    get("pattern", c.pattern);
    get("mlp_mult", c.mlp_mult);
    get("tie_embeddings", c.tie_embeddings);
    get("window", c.window);
    get("capacity", c.capacity);
    get("sink", c.sink);
    get("seq_len", c.seq_len);
    get("rope_base", c.rope_base);
    get("gdn_alpha_bias", c.gdn_alpha_bias);
    get("frozen_retention", c.frozen_retention);
}

inline std::string layer_prefix(std::size_t l) {
    return "layers." + std::to_string(l) + ".";
}

/// Name -> tensor, ordered by name so iteration (and hashing) is stable.
using ParamMap = std::map<std::string, Tensor>;

namespace detail {

inline Tensor fan_in_uniform(const std::string& name, Shape shape, std::size_t fan_in, std::uint64_t seed) {
    Rng rng(derive_seed(seed, name));
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_tensor<double>(std::move(shape), rng, -a, a);
}

inline std::string scorer_name(std::size_t l, const std::string& leaf) {
    return layer_prefix(l) + "scorer." + leaf;
}

}  // namespace detail

/// Shapes of every parameter of a configuration (scorer entries flagged).
struct ParamSpec {
    std::string name;
    Shape shape;
    bool scorer = false;
};

inline std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
    std::vector<ParamSpec> s;
    const std::size_t D = c.d_model, V = c.vocab;
    s.push_back({"embed", {V, D}});
    for (std::size_t l = 0; l < c.layers(); ++l) {
        const std::string p = layer_prefix(l);
        const MixerKind kind = mixer_kind(c.pattern[l]);
        s.push_back({p + "norm1", {D}});
        if (kind == MixerKind::gdn) {
            s.push_back({p + "wq", {D, D}});
            s.push_back({p + "wk", {D, D}});
            s.push_back({p + "wv", {D, D}});
            s.push_back({p + "wo", {D, D}});
            s.push_back({p + "wa", {D, c.gdn_heads}});
            s.push_back({p + "ba", {c.gdn_heads}});
            s.push_back({p + "wb", {D, c.gdn_heads}});
            s.push_back({p + "bb", {c.gdn_heads}});
        } else {
            s.push_back({p + "wq", {D, c.heads * c.head_dim}});
            s.push_back({p + "wk", {D, c.kv_heads * c.head_dim}});
            s.push_back({p + "wv", {D, c.kv_heads * c.head_dim}});
            s.push_back({p + "wo", {c.heads * c.head_dim, D}});
            if (kind == MixerKind::lte) {
                const auto w = LteScorerParams::widths(c.head_dim);
                for (std::size_t k = 0; k < kScorerLayers; ++k) {
                    s.push_back({detail::scorer_name(l, "conv" + std::to_string(k) + ".weight"),
                                 {c.kv_heads * w[k + 1], w[k], kScorerKernel},
                                 true});
                    s.push_back({detail::scorer_name(l, "conv" + std::to_string(k) + ".bias"), {c.kv_heads * w[k + 1]}, true});
                }
                s.push_back({detail::scorer_name(l, "head.weight"), {c.kv_heads, w.back(), 1}, true});
                s.push_back({detail::scorer_name(l, "head.bias"), {c.kv_heads}, true});
            }
        }
        if (c.mlp_mult > 0) {
            s.push_back({p + "norm2", {D}});
            s.push_back({p + "w1", {D, c.mlp_mult * D}});
            s.push_back({p + "w2", {c.mlp_mult * D, D}});
        }
    }
    s.push_back({"norm_f", {D}});
    if (!c.tie_embeddings) {
        s.push_back({"unembed", {D, V}});
    }
    return s;
}

struct ParameterReport {
    std::size_t host = 0;    // everything except the scorer
    std::size_t scorer = 0;
    double ratio() const {
        return host ? static_cast<double>(scorer) / static_cast<double>(host) : 0.0;
    }
};

inline ParameterReport parameter_report(const ModelConfig& c) {
    ParameterReport r;
    for (const auto& spec : parameter_specs(c)) {
        (spec.scorer ? r.scorer : r.host) += shape_size(spec.shape);
    }
    return r;
}

struct ModelParams {
    ModelConfig config;
    ParamMap tensors;

    /// Every tensor is drawn from its own stream derive_seed(seed, name).
    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate_runnable();
        ModelParams m{cfg, {}};
        const auto specs = parameter_specs(cfg);
        std::map<std::string, Shape> shapes;
        for (const auto& spec : specs) {
            shapes[spec.name] = spec.shape;
        }
        for (const auto& spec : specs) {
            const std::string& n = spec.name;
            const bool is_gain = n == "norm_f" || n.ends_with("norm1") || n.ends_with("norm2");
            if (is_gain) {
                m.tensors[n] = Tensor::filled(spec.shape, 1.0);
            } else if (n.ends_with(".ba")) {
                m.tensors[n] = Tensor::filled(spec.shape, cfg.gdn_alpha_bias);
            } else if (n.ends_with(".bb") || n.ends_with("head.bias")) {
                m.tensors[n] = Tensor(spec.shape);
            } else if (spec.scorer) {
                // [out, in/groups, k] weights; biases share their weight's fan-in
                const std::string wname = n.ends_with(".bias") ? n.substr(0, n.size() - 5) + ".weight" : n;
                const Shape& ws = shapes.at(wname);
                m.tensors[n] = detail::fan_in_uniform(n, spec.shape, ws[1] * ws[2], seed);
                if (n.ends_with("head.weight")) {
                    for (auto& x : m.tensors[n].storage()) {
                        x *= kScorerHeadInitScale;
                    }
                }
            } else if (n == "embed") {
                Rng rng(derive_seed(seed, n));
                m.tensors[n] = normal_tensor<double>(spec.shape, rng, 1.0);
            } else {
                m.tensors[n] = detail::fan_in_uniform(n, spec.shape, spec.shape[0], seed);
            }
        }
        return m;
    }

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        EVICTD_CHECK(it != tensors.end(), ParameterError, "missing parameter '" + name + "'");
        return it->second;
    }

    LteScorerParams scorer(std::size_t layer) const {
        LteScorerParams p;
        p.heads = config.kv_heads;
        p.head_dim = config.head_dim;
        for (std::size_t k = 0; k < kScorerLayers; ++k) {
            p.layers[k].weight = at(detail::scorer_name(layer, "conv" + std::to_string(k) + ".weight"));
            p.layers[k].bias = at(detail::scorer_name(layer, "conv" + std::to_string(k) + ".bias"));
            p.layers[k].groups = config.kv_heads;
        }
        p.head.weight = at(detail::scorer_name(layer, "head.weight"));
        p.head.bias = at(detail::scorer_name(layer, "head.bias"));
        p.head.groups = config.kv_heads;
        return p;
    }

    /// FNV-1a over names, shapes and raw bytes in name order.
    std::uint64_t content_hash() const {
        std::uint64_t h = fnv1a64("evictd.params");
        for (const auto& [name, t] : tensors) {
            h = fnv1a64(name, h);
            h = fnv1a64(shape_str(t.shape()), h);
            h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double)), h);
        }
        return h;
    }
};

/// Tape handles of all parameters; scorer weights are constants when frozen.
using VarMap = std::map<std::string, ad::Var>;

inline VarMap bind_params(ad::Tape& tape, const ModelParams& m, bool trainable, bool train_scorer = true) {
    VarMap vars;
    const auto specs = parameter_specs(m.config);
    for (const auto& spec : specs) {
        const Tensor& t = m.at(spec.name);
        const bool learn = trainable && (!spec.scorer || train_scorer);
        vars.emplace(spec.name, learn ? tape.parameter(t) : tape.constant(t));
    }
    return vars;
}

inline ad::ScorerVars scorer_vars(const VarMap& vars, std::size_t layer) {
    ad::ScorerVars s;
    for (std::size_t k = 0; k < kScorerLayers; ++k) {
        s.weight[k] = vars.at(detail::scorer_name(layer, "conv" + std::to_string(k) + ".weight"));
        s.bias[k] = vars.at(detail::scorer_name(layer, "conv" + std::to_string(k) + ".bias"));
    }
    s.head_weight = vars.at(detail::scorer_name(layer, "head.weight"));
    s.head_bias = vars.at(detail::scorer_name(layer, "head.bias"));
    return s;
}

struct ForwardOptions {
    Mode mode = Mode::eval;
    std::uint64_t dropout_seed = 0;
    bool retain_all = false;  // LTE layers attend as if r == 1 but keep the straight-through path to r
};

/// Per-sequence side outputs of a tape forward.
struct ForwardAux {
    std::vector<std::size_t> lte_layers;
    std::vector<ad::Var> retention;  // r [T x heads] per LTE layer (absent when frozen)
};

namespace detail {

inline std::vector<std::size_t> iota_positions(std::size_t T) {
    std::vector<std::size_t> pos(T);
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    return pos;
}

inline std::vector<IndexSet> shared_index_sets(IndexSet idx, std::size_t heads) {
    return std::vector<IndexSet>(heads, std::move(idx));
}

inline IndexSet swa_index_set(std::size_t T, std::size_t w) {
    IndexSet idx(T);
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = i + 1 >= w ? i + 1 - w : 0; j <= i; ++j) {
            idx[i].push_back(static_cast<std::uint32_t>(j));
        }
    }
    return idx;
}

}  // namespace detail

/**
 * Tape forward of one sequence: logits [T x vocab]. Attention mixers see full sequences with the
 * training-time index sets (no cap); LTE layers score with both-sides zero padding.
 */
inline ad::Var forward_logits(const VarMap& P,
                              const ModelConfig& c,
                              const std::vector<int>& ids,
                              const SinusoidTable& table,
                              const ForwardOptions& opt = {},
                              ForwardAux* aux = nullptr) {
    ad::Tape& tape = *P.at("embed").tape;
    const std::size_t T = ids.size(), H = c.heads, d = c.head_dim;
    const auto pos = detail::iota_positions(T);
    const double scale = default_scale(d);
    ad::Var x = ad::embedding(P.at("embed"), ids);
    for (std::size_t l = 0; l < c.layers(); ++l) {
        const std::string p = layer_prefix(l);
        const MixerKind kind = mixer_kind(c.pattern[l]);
        ad::Var h = ad::rmsnorm(x, P.at(p + "norm1"));
        ad::Var mixed;
        if (kind == MixerKind::gdn) {
            const std::size_t gh = c.gdn_heads, gd = c.d_model / gh;
            ad::Var q = ad::l2norm_heads(ad::matmul(h, P.at(p + "wq")), gd);
            ad::Var k = ad::l2norm_heads(ad::matmul(h, P.at(p + "wk")), gd);
            ad::Var v = ad::matmul(h, P.at(p + "wv"));
            ad::Var a = ad::sigmoid(ad::add_bias(ad::matmul(h, P.at(p + "wa")), P.at(p + "ba")));
            ad::Var b = ad::sigmoid(ad::add_bias(ad::matmul(h, P.at(p + "wb")), P.at(p + "bb")));
            mixed = ad::gdn(q, k, v, a, b, GdnShape{gh, gd, gd});
        } else {
            ad::Var q = ad::matmul(h, P.at(p + "wq"));
            ad::Var k = ad::matmul(h, P.at(p + "wk"));
            ad::Var v = ad::matmul(h, P.at(p + "wv"));
            ad::Var qr = ad::rope(q, pos, table);
            ad::Var kr = ad::rope(k, pos, table);
            if (kind == MixerKind::lte) {
                if (c.frozen_retention) {
                    const Tensor ones = Tensor::filled({T, H}, 1.0);
                    mixed = ad::multihead_attention(qr, kr, v, H, ad::retention_index_sets(ones, c.sink, c.window), scale);
                } else {
                    ad::Var r = ad::score_tokens(k, v, scorer_vars(P, l), H, d, opt.mode,
                                                 derive_seed(opt.dropout_seed, p + "scorer"));
                    const Tensor keep = opt.retain_all ? Tensor::filled({T, H}, 1.0) : r.value();
                    mixed = ad::multihead_attention(qr, kr, v, H, ad::retention_index_sets(keep, c.sink, c.window), scale,
                                                    ad::RetentionGate{r, c.sink, c.window});
                    if (aux) {
                        aux->lte_layers.push_back(l);
                        aux->retention.push_back(r);
                    }
                }
            } else if (kind == MixerKind::swa) {
                mixed = ad::multihead_attention(qr, kr, v, H, detail::shared_index_sets(detail::swa_index_set(T, c.window), H), scale);
            } else {
                mixed = ad::multihead_attention(qr, kr, v, H, detail::shared_index_sets(full_causal_index_set(T), H), scale);
            }
        }
        x = ad::add(x, ad::matmul(mixed, P.at(p + "wo")));
        if (c.mlp_mult > 0) {
            ad::Var h2 = ad::rmsnorm(x, P.at(p + "norm2"));
            x = ad::add(x, ad::matmul(ad::swish(ad::matmul(h2, P.at(p + "w1"))), P.at(p + "w2")));
        }
    }
    ad::Var y = ad::rmsnorm(x, P.at("norm_f"));
    (void)tape;
    return ad::matmul(y, c.tie_embeddings ? ad::transpose(P.at("embed")) : P.at("unembed"));
}

/// Evaluation-mode logits without gradients.
inline Tensor evaluate_logits(const ModelParams& m, const std::vector<int>& ids, const SinusoidTable& table) {
    ad::Tape tape;
    const VarMap P = bind_params(tape, m, false);
    return forward_logits(P, m.config, ids, table).value();
}

// ---------------------------------------------------------------------------------------------
// Incremental inference

/// Audit trail of one constant-size attention layer: everything the replay oracle needs.
struct LayerAudit {
    std::size_t layer = 0;
    Tensor q_post, k_post, v;  // [n x heads*d], appended per token
    Tensor out;
    std::size_t prompt = 0;    // rows produced by prefill
};

namespace detail {

inline void append_rows(Tensor& dst, const Tensor& rows) {
    if (dst.rank() != 2) {
        dst = Tensor({0, rows.dim(1)});
    }
    std::vector<double> data = dst.storage();
    data.insert(data.end(), rows.data().begin(), rows.data().end());
    dst = Tensor({dst.dim(0) + rows.dim(0), rows.dim(1)}, std::move(data));
}

inline Tensor slice_head(const Tensor& x, std::size_t h, std::size_t d) {
    Tensor out({x.dim(0), d});
    for (std::size_t t = 0; t < x.dim(0); ++t) {
        std::copy_n(x.row(t).begin() + static_cast<std::ptrdiff_t>(h * d), d, out.row(t).begin());
    }
    return out;
}

}  // namespace detail

/**
 * Prefill/decode over the whole stack. GDN layers carry their recurrent state; LTE layers run
 * the constant-size cache; SWA and dense layers keep full history and mask by position.
 */
class InferenceSession {
public:
    InferenceSession(const ModelParams& model, ScoringPolicy policy = ScoringPolicy::lazy, bool audit = false)
        : m_model(&model),
          m_table(std::make_unique<SinusoidTable>(model.config.head_dim, model.config.rope_base)),
          m_audit_enabled(audit) {
        const ModelConfig& c = model.config;
        c.validate_runnable();
        EVICTD_CHECK(!c.frozen_retention, ConfigError, "inference: frozen retention is a training-only mode");
        const CacheConfig cc{c.heads, c.head_dim, c.window, c.capacity, c.sink, 16};
        m_layers.resize(c.layers());
        for (std::size_t l = 0; l < c.layers(); ++l) {
            auto& L = m_layers[l];
            L.kind = mixer_kind(c.pattern[l]);
            if (L.kind == MixerKind::lte) {
                L.scorer = std::make_unique<LteScorerParams>(model.scorer(l));
                L.cache = std::make_unique<LteLayerCache>(cc, *L.scorer, *m_table, policy, audit);
                if (audit) {
                    m_audits.push_back(LayerAudit{l, {}, {}, {}, {}, 0});
                    L.audit = m_audits.size() - 1;
                }
            }
        }
    }

    std::size_t length() const {
        return m_length;
    }
    const ModelConfig& config() const {
        return m_model->config;
    }
    const LteLayerCache* cache(std::size_t layer) const {
        return m_layers[layer].cache.get();
    }
    const std::vector<LayerAudit>& audits() const {
        return m_audits;
    }
    const SinusoidTable& table() const {
        return *m_table;
    }

    /// Logits [T x vocab] for the prompt.
    Tensor prefill(const std::vector<int>& ids) {
        EVICTD_CHECK(m_length == 0, ContractViolation, "inference: prefill on a used session");
        EVICTD_CHECK(!ids.empty(), ParameterError, "inference: empty prompt");
        Tensor logits = step(ids, true);
        m_length = ids.size();
        return logits;
    }

    /// Logits [1 x vocab] for the next token.
    Tensor decode(int id) {
        Tensor logits = step({id}, false);
        ++m_length;
        return logits;
    }

private:
    struct LayerState {
        MixerKind kind = MixerKind::gdn;
        std::vector<GdnState> gdn;
        std::unique_ptr<LteScorerParams> scorer;
        std::unique_ptr<LteLayerCache> cache;
        Tensor hist_k, hist_v;  // post-RoPE history for S / A layers
        std::size_t audit = 0;
    };

    Tensor step(const std::vector<int>& ids, bool prefill) {
        const ModelConfig& c = m_model->config;
        const std::size_t T = ids.size(), H = c.heads, d = c.head_dim;
        for (int id : ids) {
            EVICTD_CHECK(id >= 0 && static_cast<std::size_t>(id) < c.vocab, ParameterError, "inference: token id out of range");
        }
        std::vector<std::size_t> pos(T);
        std::iota(pos.begin(), pos.end(), m_length);
        ad::Tape tape;
        const VarMap P = bind_params(tape, *m_model, false);
        ad::Var x = ad::embedding(P.at("embed"), ids);
        for (std::size_t l = 0; l < c.layers(); ++l) {
            const std::string p = layer_prefix(l);
            auto& L = m_layers[l];
            ad::Var h = ad::rmsnorm(x, P.at(p + "norm1"));
            Tensor mixed;
            if (L.kind == MixerKind::gdn) {
                const std::size_t gh = c.gdn_heads, gd = c.d_model / gh;
                const Tensor q = ad::l2norm_heads(ad::matmul(h, P.at(p + "wq")), gd).value();
                const Tensor k = ad::l2norm_heads(ad::matmul(h, P.at(p + "wk")), gd).value();
                const Tensor v = ad::matmul(h, P.at(p + "wv")).value();
                const Tensor a = ad::sigmoid(ad::add_bias(ad::matmul(h, P.at(p + "wa")), P.at(p + "ba"))).value();
                const Tensor b = ad::sigmoid(ad::add_bias(ad::matmul(h, P.at(p + "wb")), P.at(p + "bb"))).value();
                mixed = gdn_layer_forward(q, k, v, a, b, GdnShape{gh, gd, gd}, L.gdn);
            } else {
                const Tensor q = ad::matmul(h, P.at(p + "wq")).value();
                const Tensor k = ad::matmul(h, P.at(p + "wk")).value();
                const Tensor v = ad::matmul(h, P.at(p + "wv")).value();
                const Tensor qr = apply_rope(q, pos, *m_table);
                if (L.kind == MixerKind::lte) {
                    if (prefill) {
                        mixed = L.cache->prefill(qr, k, v);
                    } else {
                        mixed = L.cache->decode(qr.data(), k.data(), v.data());
                    }
                    if (m_audit_enabled) {
                        LayerAudit& A = m_audits[L.audit];
                        detail::append_rows(A.q_post, qr);
                        detail::append_rows(A.k_post, apply_rope(k, pos, *m_table));
                        detail::append_rows(A.v, v);
                        detail::append_rows(A.out, mixed);
                        if (prefill) {
                            A.prompt = T;
                        }
                    }
                } else {
                    detail::append_rows(L.hist_k, apply_rope(k, pos, *m_table));
                    detail::append_rows(L.hist_v, v);
                    mixed = history_attention(L, qr, pos, c);
                }
            }
            x = ad::add(x, ad::matmul(tape.constant(mixed), P.at(p + "wo")));
            if (c.mlp_mult > 0) {
                ad::Var h2 = ad::rmsnorm(x, P.at(p + "norm2"));
                x = ad::add(x, ad::matmul(ad::swish(ad::matmul(h2, P.at(p + "w1"))), P.at(p + "w2")));
            }
        }
        (void)H;
        (void)d;
        ad::Var y = ad::rmsnorm(x, P.at("norm_f"));
        return ad::matmul(y, c.tie_embeddings ? ad::transpose(P.at("embed")) : P.at("unembed")).value();
    }

    Tensor history_attention(const LayerState& L, const Tensor& qr, const std::vector<std::size_t>& pos, const ModelConfig& c) const {
        const std::size_t H = c.heads, d = c.head_dim, n = L.hist_k.dim(0);
        Tensor out({qr.dim(0), H * d});
        IndexSet idx(qr.dim(0));
        for (std::size_t t = 0; t < qr.dim(0); ++t) {
            const std::size_t i = pos[t];
            const std::size_t lo = L.kind == MixerKind::swa && i + 1 >= c.window ? i + 1 - c.window : 0;
            for (std::size_t j = lo; j <= i && j < n; ++j) {
                idx[t].push_back(static_cast<std::uint32_t>(j));
            }
        }
        for (std::size_t h = 0; h < H; ++h) {
            const Tensor oh = masked_attention_oracle(detail::slice_head(qr, h, d), detail::slice_head(L.hist_k, h, d),
                                                      detail::slice_head(L.hist_v, h, d), idx, default_scale(d));
            for (std::size_t t = 0; t < qr.dim(0); ++t) {
                std::copy_n(oh.row(t).begin(), d, out.row(t).begin() + static_cast<std::ptrdiff_t>(h * d));
            }
        }
        return out;
    }

    const ModelParams* m_model;
    std::unique_ptr<SinusoidTable> m_table;
    bool m_audit_enabled;
    std::vector<LayerState> m_layers;
    std::vector<LayerAudit> m_audits;
    std::size_t m_length = 0;
};

struct ReplayReport {
    std::size_t layers_checked = 0;
    std::size_t rows_checked = 0;
    double max_abs_diff = 0.0;
    bool ok = true;
};

namespace detail {

/**
 * Set-level restatement of the out-of-window retention policy, kept independent of the cache's
 * buffers: prompt tokens keep sinks plus the top-b flagged tokens, and each token leaving the
 * window afterwards is admitted while there is room or swapped for the lowest-scored unprotected
 * entry when strictly better.
 */
class ReferenceRetention {
public:
    ReferenceRetention(std::size_t capacity, std::size_t sink) : m_capacity(capacity), m_sink(sink) {}

    void prefill(std::size_t boundary, const std::vector<double>& r) {
        std::vector<std::size_t> flagged;
        for (std::size_t j = 0; j < boundary; ++j) {
            if (j < m_sink) {
                m_kept.emplace_back(j, r[j]);
            } else if (r[j] > 0.5) {
                flagged.push_back(j);
            }
        }
        std::stable_sort(flagged.begin(), flagged.end(), [&](std::size_t a, std::size_t b) { return r[a] > r[b]; });
        const std::size_t room = m_capacity - m_kept.size();
        for (std::size_t n = 0; n < flagged.size() && n < room; ++n) {
            m_kept.emplace_back(flagged[n], r[flagged[n]]);
        }
        std::sort(m_kept.begin(), m_kept.end());
    }

    void offer(std::size_t j, double score) {
        if (j < m_sink) {
            m_kept.emplace_back(j, score);
            return;
        }
        if (!(score > 0.5)) {
            return;
        }
        if (m_kept.size() < m_capacity) {
            m_kept.emplace_back(j, score);
            return;
        }
        auto victim = m_kept.end();
        for (auto it = m_kept.begin(); it != m_kept.end(); ++it) {
            if (it->first >= m_sink && (victim == m_kept.end() || it->second < victim->second)) {
                victim = it;
            }
        }
        if (victim != m_kept.end() && score > victim->second) {
            *victim = {j, score};
        }
    }

    std::vector<std::size_t> positions() const {
        std::vector<std::size_t> p;
        for (const auto& e : m_kept) {
            p.push_back(e.first);
        }
        std::sort(p.begin(), p.end());
        return p;
    }

private:
    std::size_t m_capacity, m_sink;
    std::vector<std::pair<std::size_t, double>> m_kept;
};

}  // namespace detail

/**
 * Rebuilds every audited LTE layer's decode outputs from complete history with an explicit
 * masked softmax per query. Scores are the ones the cache computed. With cap_aware the
 * out-of-window set follows the reference retention policy; without it, the plain
 * sink/flag/window rule (equal to the cache only while retention never exceeds b).
 */
inline ReplayReport replay_check(const InferenceSession& s, double tol = 1e-10, bool cap_aware = true) {
    ReplayReport rep;
    const ModelConfig& c = s.config();
    const std::size_t H = c.heads, d = c.head_dim, w = c.window;
    for (const LayerAudit& A : s.audits()) {
        const auto& hist = s.cache(A.layer)->score_history();
        const std::size_t n = A.q_post.dim(0);
        ++rep.layers_checked;
        for (std::size_t h = 0; h < H; ++h) {
            std::vector<double> r(n, 0.0);
            for (std::size_t j = 0; j < n && j < hist.size(); ++j) {
                if (!hist[j].empty()) {
                    r[j] = hist[j][h];
                }
            }
            const Tensor qh = detail::slice_head(A.q_post, h, d);
            const Tensor kh = detail::slice_head(A.k_post, h, d);
            const Tensor vh = detail::slice_head(A.v, h, d);
            detail::ReferenceRetention ref(c.capacity, c.sink);
            ref.prefill(A.prompt > w ? A.prompt - w : 0, r);
            for (std::size_t i = A.prompt; i < n; ++i) {
                IndexSet idx(1);
                if (cap_aware) {
                    for (std::size_t j : ref.positions()) {
                        idx[0].push_back(static_cast<std::uint32_t>(j));
                    }
                    for (std::size_t j = i >= w ? i - w : 0; j <= i; ++j) {
                        idx[0].push_back(static_cast<std::uint32_t>(j));
                    }
                } else {
                    for (std::size_t j = 0; j <= i; ++j) {
                        if (admitted(i, j, c.sink, w, r[j])) {
                            idx[0].push_back(static_cast<std::uint32_t>(j));
                        }
                    }
                }
                Tensor qi({1, d}, std::vector<double>(qh.row(i).begin(), qh.row(i).end()));
                const Tensor o = masked_attention_oracle(qi, kh, vh, idx, default_scale(d));
                for (std::size_t cidx = 0; cidx < d; ++cidx) {
                    rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(o(0, cidx) - A.out(i, h * d + cidx)));
                }
                if (i >= w) {
                    ref.offer(i - w, r[i - w]);
                }
            }
        }
        rep.rows_checked += n - A.prompt;
    }
    rep.ok = rep.max_abs_diff <= tol;
    return rep;
}

}  // namespace evictd
