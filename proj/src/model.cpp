#include "milab/model.hpp"

#include <cmath>
#include <cstring>

namespace milab {

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || vocab_size < 1 || max_seq < 1)
        throw validation_error("config: dimensions must be positive");
    if (d_head * n_heads != d_model)
        throw validation_error("config: d_head * n_heads must equal d_model");
}

std::string head_name(const HeadRef& h) {
    return "L" + std::to_string(h.layer) + "H" + std::to_string(h.head);
}

std::string node_name(const NodeRef& n) {
    switch (n.kind) {
        case NodeKind::head: return head_name({n.layer, n.head});
        case NodeKind::mlp: return "MLP" + std::to_string(n.layer);
        case NodeKind::embed: return "embed";
    }
    return "?";
}

const char* site_name(Site s) {
    switch (s) {
        case Site::q: return "q";
        case Site::k: return "k";
        case Site::v: return "v";
        case Site::z: return "z";
        case Site::pattern: return "pattern";
        case Site::result: return "result";
        case Site::mlp_out: return "mlp_out";
        case Site::resid_pre: return "resid_pre";
        case Site::resid_mid: return "resid_mid";
        case Site::resid_post: return "resid_post";
        case Site::embed: return "embed";
        case Site::logits: return "logits";
    }
    return "?";
}

HookKey output_hook(const NodeRef& n) {
    switch (n.kind) {
        case NodeKind::head: return HookKey::head_site(n.layer, n.head, Site::result);
        case NodeKind::mlp: return HookKey::layer_site(n.layer, Site::mlp_out);
        case NodeKind::embed: return HookKey::embed_site();
    }
    throw validation_error("output_hook: bad node");
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Tensor*>> TransformerModel::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("tok_embed", &tok_embed);
    out.emplace_back("pos_embed", &pos_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        auto& lw = layers[l];
        std::string p = "blocks." + std::to_string(l) + ".";
        out.emplace_back(p + "ln1.g", &lw.ln1_g);
        out.emplace_back(p + "ln1.b", &lw.ln1_b);
        for (int h = 0; h < config.n_heads; ++h) {
            std::string hp = p + "head." + std::to_string(h) + ".";
            out.emplace_back(hp + "wq", &lw.w_q[static_cast<size_t>(h)]);
            out.emplace_back(hp + "wk", &lw.w_k[static_cast<size_t>(h)]);
            out.emplace_back(hp + "wv", &lw.w_v[static_cast<size_t>(h)]);
            out.emplace_back(hp + "wo", &lw.w_o[static_cast<size_t>(h)]);
        }
        out.emplace_back(p + "mlp.w_in", &lw.mlp_w_in);
        out.emplace_back(p + "mlp.b_in", &lw.mlp_b_in);
        out.emplace_back(p + "mlp.w_out", &lw.mlp_w_out);
        out.emplace_back(p + "mlp.b_out", &lw.mlp_b_out);
        out.emplace_back(p + "ln2.g", &lw.ln2_g);
        out.emplace_back(p + "ln2.b", &lw.ln2_b);
    }
    out.emplace_back("ln_f.g", &ln_f_g);
    out.emplace_back("unembed", &unembed);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> TransformerModel::named_params() const {
    auto mut = const_cast<TransformerModel*>(this)->named_params();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [n, t] : mut) out.emplace_back(n, t);
    return out;
}

int64_t TransformerModel::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t->numel();
    return n;
}

std::string TransformerModel::hash() const {
    std::string bytes;
    for (const auto& [name, t] : named_params()) {
        const char* p = reinterpret_cast<const char*>(t->data.data());
        bytes.append(p, t->data.size() * sizeof(double));
    }
    return sha256_hex(bytes);
}

TransformerModel build_model(const ModelConfig& config) {
    config.validate();
    TransformerModel m;
    m.config = config;
    int D = config.d_model, K = config.d_head, H = config.n_heads, V = config.vocab_size;
    m.tok_embed = Tensor::zeros({V, D});
    m.pos_embed = Tensor::zeros({config.max_seq, D});
    m.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto& lw : m.layers) {
        lw.w_q.assign(static_cast<size_t>(H), Tensor::zeros({K, D}));
        lw.w_k.assign(static_cast<size_t>(H), Tensor::zeros({K, D}));
        lw.w_v.assign(static_cast<size_t>(H), Tensor::zeros({K, D}));
        lw.w_o.assign(static_cast<size_t>(H), Tensor::zeros({K, D}));
        lw.ln1_g = Tensor::full({D}, 1.0);
        lw.ln1_b = Tensor::zeros({D});
        lw.mlp_w_in = Tensor::zeros({D, config.d_hidden()});
        lw.mlp_b_in = Tensor::zeros({config.d_hidden()});
        lw.mlp_w_out = Tensor::zeros({config.d_hidden(), D});
        lw.mlp_b_out = Tensor::zeros({D});
        lw.ln2_g = Tensor::full({D}, 1.0);
        lw.ln2_b = Tensor::zeros({D});
    }
    m.ln_f_g = Tensor::full({D}, 1.0);
    m.unembed = Tensor::zeros({D, V});

    const double base = 0.02;
    const double scaled = base / std::sqrt(2.0 * config.n_layers);
    Rng rng(config.seed);
    for (auto& [name, t] : m.named_params()) {
        bool is_ln = name.find("ln") != std::string::npos;
        bool is_bias = name.find(".b_") != std::string::npos;
        if (is_ln || is_bias) continue;  // identity / zero init
        bool output_facing =
            name.find(".wo") != std::string::npos || name.find("w_out") != std::string::npos;
        double sigma = output_facing ? scaled : base;
        for (auto& v : t->data) v = rng.normal(0.0, sigma);
    }
    return m;
}

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

TokenBatch TokenBatch::from_samples(const std::vector<PromptSample>& samples, int pad_to,
                                    int pad_token) {
    if (samples.empty()) throw validation_error("TokenBatch: empty sample list");
    int S = pad_to;
    for (const auto& s : samples) S = std::max(S, static_cast<int>(s.tokens.size()));
    TokenBatch b;
    b.B = static_cast<int>(samples.size());
    b.S = S;
    b.tokens.assign(static_cast<size_t>(b.B) * S, pad_token);
    for (int i = 0; i < b.B; ++i) {
        const auto& s = samples[static_cast<size_t>(i)];
        if (static_cast<int>(s.tokens.size()) > S) throw validation_error("TokenBatch: overlong sample");
        std::copy(s.tokens.begin(), s.tokens.end(),
                  b.tokens.begin() + static_cast<int64_t>(i) * S);
        b.end_pos.push_back(s.positions.end);
        b.labels.push_back(s.label < 0 ? 0 : s.label);
    }
    return b;
}

TokenBatch TokenBatch::single(const PromptSample& s) {
    return from_samples({s}, -1, Vocabulary::instance().bos());
}

const Tensor& ActivationCache::site(const HookKey& key) const {
    switch (key.site) {
        case Site::q: return q[static_cast<size_t>(key.layer)][static_cast<size_t>(key.head)];
        case Site::k: return k[static_cast<size_t>(key.layer)][static_cast<size_t>(key.head)];
        case Site::v: return v[static_cast<size_t>(key.layer)][static_cast<size_t>(key.head)];
        case Site::z: return z[static_cast<size_t>(key.layer)][static_cast<size_t>(key.head)];
        case Site::pattern:
            return pattern[static_cast<size_t>(key.layer)][static_cast<size_t>(key.head)];
        case Site::result:
            return result[static_cast<size_t>(key.layer)][static_cast<size_t>(key.head)];
        case Site::mlp_out: return mlp_out[static_cast<size_t>(key.layer)];
        case Site::resid_pre: return resid_pre[static_cast<size_t>(key.layer)];
        case Site::resid_mid: return resid_mid[static_cast<size_t>(key.layer)];
        case Site::resid_post: return resid_post[static_cast<size_t>(key.layer)];
        case Site::embed: return embed;
        case Site::logits: return logits;
    }
    throw validation_error("cache: unknown site");
}

// ---------------------------------------------------------------------------
// runner
// ---------------------------------------------------------------------------

namespace {

// One compute graph per (B, S): full logits head plus END-token and
// full-sequence loss heads; forward() only evaluates what the call needs.
struct ModelGraph {
    Graph g;
    int B = 0, S = 0;
    std::vector<NodeId> params;  // named_params() order
    NodeId tokens = -1;
    NodeId mask = -1;
    NodeId end_pos = -1;
    NodeId labels_end = -1;
    NodeId labels_full = -1;
    NodeId weights_full = -1;
    NodeId logits_full = -1;
    NodeId logits_end = -1;
    NodeId loss_end = -1;
    NodeId loss_full = -1;
    std::map<HookKey, NodeId> hooks;
};

}  // namespace

struct ModelRunner::Impl {
    std::map<std::pair<int, int>, std::unique_ptr<ModelGraph>> graphs;

    ModelGraph& graph_for(const TransformerModel& m, int B, int S) {
        auto key = std::make_pair(B, S);
        auto it = graphs.find(key);
        if (it != graphs.end()) return *it->second;
        auto mg = std::make_unique<ModelGraph>();
        build(m, B, S, *mg);
        auto& ref = *mg;
        graphs.emplace(key, std::move(mg));
        return ref;
    }

    void build(const TransformerModel& m, int B, int S, ModelGraph& mg) {
        const ModelConfig& c = m.config;
        if (S > c.max_seq) throw validation_error("sequence longer than max_seq");
        mg.B = B;
        mg.S = S;
        Graph& g = mg.g;

        auto named = m.named_params();
        std::map<std::string, NodeId> by_name;
        for (const auto& [name, t] : named) {
            NodeId id = g.param(*t);
            mg.params.push_back(id);
            by_name[name] = id;
        }

        mg.tokens = g.index_input({B, S});
        mg.mask = g.input({S, S});
        Tensor mask = Tensor::zeros({S, S});
        for (int i = 0; i < S; ++i)
            for (int j = i + 1; j < S; ++j) mask.at(i, j) = -1e30;
        g.bind(mg.mask, mask);

        NodeId tok = g.embed_lookup(by_name["tok_embed"], mg.tokens);
        NodeId pos = g.slice(by_name["pos_embed"], 0, 0, S);
        NodeId embed = g.add(tok, pos);
        mg.hooks[HookKey::embed_site()] = embed;

        double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(c.d_head));
        NodeId resid = embed;
        for (int l = 0; l < c.n_layers; ++l) {
            std::string p = "blocks." + std::to_string(l) + ".";
            mg.hooks[HookKey::layer_site(l, Site::resid_pre)] = resid;
            NodeId ln1 = g.layer_norm(resid, by_name[p + "ln1.g"], by_name[p + "ln1.b"]);
            NodeId attn_sum = -1;
            for (int h = 0; h < c.n_heads; ++h) {
                std::string hp = p + "head." + std::to_string(h) + ".";
                NodeId q = g.matmul(ln1, g.transpose(by_name[hp + "wq"]));
                NodeId k = g.matmul(ln1, g.transpose(by_name[hp + "wk"]));
                NodeId v = g.matmul(ln1, g.transpose(by_name[hp + "wv"]));
                mg.hooks[HookKey::head_site(l, h, Site::q)] = q;
                mg.hooks[HookKey::head_site(l, h, Site::k)] = k;
                mg.hooks[HookKey::head_site(l, h, Site::v)] = v;
                NodeId scores = g.scale(g.matmul(q, g.transpose(k)), inv_sqrt_dh);
                NodeId pattern = g.softmax(g.add(scores, mg.mask));
                mg.hooks[HookKey::head_site(l, h, Site::pattern)] = pattern;
                NodeId z = g.matmul(pattern, v);
                mg.hooks[HookKey::head_site(l, h, Site::z)] = z;
                NodeId result = g.matmul(z, by_name[hp + "wo"]);
                mg.hooks[HookKey::head_site(l, h, Site::result)] = result;
                attn_sum = (attn_sum < 0) ? result : g.add(attn_sum, result);
            }
            NodeId resid_mid = g.add(resid, attn_sum);
            mg.hooks[HookKey::layer_site(l, Site::resid_mid)] = resid_mid;
            NodeId ln2 = g.layer_norm(resid_mid, by_name[p + "ln2.g"], by_name[p + "ln2.b"]);
            NodeId hidden = g.gelu(g.add(g.matmul(ln2, by_name[p + "mlp.w_in"]),
                                         by_name[p + "mlp.b_in"]));
            NodeId mlp_out = g.add(g.matmul(hidden, by_name[p + "mlp.w_out"]),
                                   by_name[p + "mlp.b_out"]);
            mg.hooks[HookKey::layer_site(l, Site::mlp_out)] = mlp_out;
            resid = g.add(resid_mid, mlp_out);
            mg.hooks[HookKey::layer_site(l, Site::resid_post)] = resid;
        }

        NodeId zero_beta = g.input({c.d_model});
        g.bind(zero_beta, Tensor::zeros({c.d_model}));
        NodeId ln_f = g.layer_norm(resid, by_name["ln_f.g"], zero_beta);
        mg.logits_full = g.matmul(ln_f, by_name["unembed"]);
        mg.hooks[HookKey{-1, -1, Site::logits}] = mg.logits_full;

        mg.end_pos = g.index_input({B});
        NodeId end_resid = g.take_positions(resid, mg.end_pos);
        NodeId ln_f_end = g.layer_norm(end_resid, by_name["ln_f.g"], zero_beta);
        mg.logits_end = g.matmul(ln_f_end, by_name["unembed"]);

        mg.labels_end = g.index_input({B});
        mg.loss_end = g.cross_entropy(mg.logits_end, mg.labels_end);

        mg.labels_full = g.index_input({B * S});
        mg.weights_full = g.input({B * S});
        mg.loss_full = g.cross_entropy(mg.logits_full, mg.labels_full, mg.weights_full);
    }

    void sync(const TransformerModel& m) {
        auto named = m.named_params();
        for (auto& [key, mg] : graphs) {
            for (size_t i = 0; i < named.size(); ++i) {
                mg->g.bind(mg->params[i], *named[i].second);
            }
        }
    }
};

ModelRunner::ModelRunner(const TransformerModel& m) : model_(&m), impl_(new Impl) {}
ModelRunner::~ModelRunner() = default;

void ModelRunner::sync_params() { impl_->sync(*model_); }

namespace {

void validate_tokens(const TransformerModel& m, const TokenBatch& batch) {
    for (int t : batch.tokens) {
        if (t < 0 || t >= m.config.vocab_size)
            throw validation_error("token id out of range: " + std::to_string(t));
    }
}

void apply_interventions(ModelGraph& mg, const std::vector<Intervention>& interventions) {
    mg.g.clear_overrides();
    for (const auto& iv : interventions) {
        auto it = mg.hooks.find(iv.key);
        if (it == mg.hooks.end())
            throw validation_error("unknown intervention site " +
                                   std::string(site_name(iv.key.site)));
        mg.g.set_override(it->second, iv.positions, iv.value);
    }
}

void capture_cache(ModelGraph& mg, const TransformerModel& m, bool with_logits,
                   ActivationCache& cache) {
    const ModelConfig& c = m.config;
    cache.B = mg.B;
    cache.S = mg.S;
    auto grab = [&](const HookKey& k) { return mg.g.value(mg.hooks.at(k)); };
    cache.q.assign(static_cast<size_t>(c.n_layers), {});
    cache.k.assign(static_cast<size_t>(c.n_layers), {});
    cache.v.assign(static_cast<size_t>(c.n_layers), {});
    cache.z.assign(static_cast<size_t>(c.n_layers), {});
    cache.pattern.assign(static_cast<size_t>(c.n_layers), {});
    cache.result.assign(static_cast<size_t>(c.n_layers), {});
    for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) {
            cache.q[static_cast<size_t>(l)].push_back(grab(HookKey::head_site(l, h, Site::q)));
            cache.k[static_cast<size_t>(l)].push_back(grab(HookKey::head_site(l, h, Site::k)));
            cache.v[static_cast<size_t>(l)].push_back(grab(HookKey::head_site(l, h, Site::v)));
            cache.z[static_cast<size_t>(l)].push_back(grab(HookKey::head_site(l, h, Site::z)));
            cache.pattern[static_cast<size_t>(l)].push_back(
                grab(HookKey::head_site(l, h, Site::pattern)));
            cache.result[static_cast<size_t>(l)].push_back(
                grab(HookKey::head_site(l, h, Site::result)));
        }
        cache.mlp_out.push_back(grab(HookKey::layer_site(l, Site::mlp_out)));
        cache.resid_pre.push_back(grab(HookKey::layer_site(l, Site::resid_pre)));
        cache.resid_mid.push_back(grab(HookKey::layer_site(l, Site::resid_mid)));
        cache.resid_post.push_back(grab(HookKey::layer_site(l, Site::resid_post)));
    }
    cache.embed = grab(HookKey::embed_site());
    cache.final_resid = cache.resid_post.back();
    if (with_logits) cache.logits = grab(HookKey{-1, -1, Site::logits});

    // frozen final-LN scale, per example per position
    int D = c.d_model;
    cache.ln_sigma = Tensor::zeros({mg.B, mg.S});
    for (int b = 0; b < mg.B; ++b) {
        for (int s = 0; s < mg.S; ++s) {
            double mu = 0.0;
            for (int j = 0; j < D; ++j) mu += cache.final_resid.at(b, s, j);
            mu /= D;
            double var = 0.0;
            for (int j = 0; j < D; ++j) {
                double d = cache.final_resid.at(b, s, j) - mu;
                var += d * d;
            }
            var /= D;
            cache.ln_sigma.at(b * mg.S + s) = std::sqrt(var + 1e-5);
        }
    }
}

}  // namespace

Tensor ModelRunner::run(const TokenBatch& batch, const std::vector<Intervention>& interventions,
                        ActivationCache* cache) {
    validate_tokens(*model_, batch);
    ModelGraph& mg = impl_->graph_for(*model_, batch.B, batch.S);
    mg.g.bind_indices(mg.tokens, batch.tokens);
    apply_interventions(mg, interventions);
    Tensor logits = mg.g.forward(mg.logits_full);
    if (cache) capture_cache(mg, *model_, true, *cache);
    mg.g.clear_overrides();
    return logits;
}

Tensor ModelRunner::run_end_logits(const TokenBatch& batch,
                                   const std::vector<Intervention>& interventions) {
    validate_tokens(*model_, batch);
    ModelGraph& mg = impl_->graph_for(*model_, batch.B, batch.S);
    mg.g.bind_indices(mg.tokens, batch.tokens);
    mg.g.bind_indices(mg.end_pos, batch.end_pos);
    apply_interventions(mg, interventions);
    Tensor logits = mg.g.forward(mg.logits_end);
    mg.g.clear_overrides();
    return logits;
}

double ModelRunner::loss_and_grads(const TokenBatch& batch, Objective objective,
                                   std::vector<Tensor>* grads) {
    validate_tokens(*model_, batch);
    ModelGraph& mg = impl_->graph_for(*model_, batch.B, batch.S);
    mg.g.bind_indices(mg.tokens, batch.tokens);
    NodeId loss_node;
    if (objective == Objective::end_token) {
        mg.g.bind_indices(mg.end_pos, batch.end_pos);
        mg.g.bind_indices(mg.labels_end, batch.labels);
        loss_node = mg.loss_end;
    } else {
        // next-token labels over the whole prompt; padding and the final
        // position weighted out, END's target is the teacher token
        std::vector<int> labels(static_cast<size_t>(batch.B) * batch.S, 0);
        Tensor weights = Tensor::zeros({batch.B * batch.S});
        for (int b = 0; b < batch.B; ++b) {
            int end = batch.end_pos[static_cast<size_t>(b)];
            for (int s = 0; s < batch.S; ++s) {
                size_t i = static_cast<size_t>(b) * batch.S + s;
                if (s < end) {
                    labels[i] = batch.tokens[i + 1];
                    weights.at(static_cast<int>(i)) = 1.0;
                } else if (s == end) {
                    labels[i] = batch.labels[static_cast<size_t>(b)];
                    weights.at(static_cast<int>(i)) = 1.0;
                }
            }
        }
        mg.g.bind_indices(mg.labels_full, labels);
        mg.g.bind(mg.weights_full, weights);
        loss_node = mg.loss_full;
    }
    double loss = mg.g.forward(loss_node).at(0);
    if (grads) {
        GradMap gm = mg.g.backward(loss_node, Tensor::scalar(1.0));
        grads->clear();
        for (NodeId pid : mg.params) {
            auto it = gm.find(pid);
            if (it != gm.end()) {
                grads->push_back(std::move(it->second));
            } else {
                grads->push_back(Tensor::zeros(mg.g.node_shape(pid)));
            }
        }
    }
    return loss;
}

std::pair<Tensor, ActivationCache> run_with_cache(const TransformerModel& m,
                                                  const TokenBatch& batch) {
    ModelRunner r(m);
    ActivationCache cache;
    Tensor logits = r.run(batch, {}, &cache);
    return {std::move(logits), std::move(cache)};
}

Tensor run_with_interventions(const TransformerModel& m, const TokenBatch& batch,
                              const std::vector<Intervention>& interventions,
                              ActivationCache* cache) {
    ModelRunner r(m);
    return r.run(batch, interventions, cache);
}

Tensor ov_matrix(const TransformerModel& m, const HeadRef& h) {
    if (h.layer < 0 || h.layer >= m.config.n_layers || h.head < 0 || h.head >= m.config.n_heads)
        throw validation_error("ov_matrix: head out of range");
    const auto& lw = m.layers[static_cast<size_t>(h.layer)];
    const Tensor& wv = lw.w_v[static_cast<size_t>(h.head)];  // (K, D)
    const Tensor& wo = lw.w_o[static_cast<size_t>(h.head)];  // (K, D)
    int K = wv.dim(0), D = wv.dim(1);
    Tensor out = Tensor::zeros({D, D});
    for (int i = 0; i < D; ++i)
        for (int kk = 0; kk < K; ++kk) {
            double a = wv.at(kk, i);
            if (a == 0.0) continue;
            for (int j = 0; j < D; ++j) out.at(i, j) += a * wo.at(kk, j);
        }
    return out;
}

Tensor qk_matrix(const TransformerModel& m, const HeadRef& h) {
    if (h.layer < 0 || h.layer >= m.config.n_layers || h.head < 0 || h.head >= m.config.n_heads)
        throw validation_error("qk_matrix: head out of range");
    const auto& lw = m.layers[static_cast<size_t>(h.layer)];
    const Tensor& wq = lw.w_q[static_cast<size_t>(h.head)];
    const Tensor& wk = lw.w_k[static_cast<size_t>(h.head)];
    int K = wq.dim(0), D = wq.dim(1);
    Tensor out = Tensor::zeros({D, D});
    for (int i = 0; i < D; ++i)
        for (int kk = 0; kk < K; ++kk) {
            double a = wq.at(kk, i);
            if (a == 0.0) continue;
            for (int j = 0; j < D; ++j) out.at(i, j) += a * wk.at(kk, j);
        }
    return out;
}

double unembed_projection(const TransformerModel& m, const std::vector<double>& v, int token,
                          double sigma) {
    if (token < 0 || token >= m.config.vocab_size)
        throw validation_error("unembed_projection: token out of range");
    int D = m.config.d_model;
    if (static_cast<int>(v.size()) != D)
        throw validation_error("unembed_projection: vector size != d_model");
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= D;
    double acc = 0.0;
    for (int i = 0; i < D; ++i) {
        acc += m.unembed.at(i, token) * m.ln_f_g.at(i) * (v[static_cast<size_t>(i)] - mu) / sigma;
    }
    return acc;
}

std::vector<double> cache_row(const Tensor& t, int b, int s) {
    int D = t.dim(2);
    std::vector<double> out(static_cast<size_t>(D));
    for (int j = 0; j < D; ++j) out[static_cast<size_t>(j)] = t.at(b, s, j);
    return out;
}

}  // namespace milab
