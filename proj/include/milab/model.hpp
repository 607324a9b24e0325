#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "milab/data.hpp"
#include "milab/tensor.hpp"

namespace milab {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 64;
    int d_head = 16;
    int vocab_size = 384;
    int max_seq = 24;
    uint64_t seed = 0;

    int d_hidden() const { return 4 * d_model; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct HeadRef {
    int layer = 0;
    int head = 0;
    auto operator<=>(const HeadRef&) const = default;
};
std::string head_name(const HeadRef& h);  // "L2H3"

enum class NodeKind { head, mlp, embed };

struct NodeRef {
    NodeKind kind = NodeKind::head;
    int layer = -1;
    int head = -1;
    static NodeRef for_head(int l, int h) { return {NodeKind::head, l, h}; }
    static NodeRef for_mlp(int l) { return {NodeKind::mlp, l, -1}; }
    static NodeRef for_embed() { return {NodeKind::embed, -1, -1}; }
    auto operator<=>(const NodeRef&) const = default;
};
std::string node_name(const NodeRef& n);

enum class Site {
    q,
    k,
    v,
    z,
    pattern,
    result,
    mlp_out,
    resid_pre,
    resid_mid,
    resid_post,
    embed,
    logits,
};
const char* site_name(Site s);

// Addresses one hook point: (layer, head, site). head = -1 for per-layer
// sites; layer = -1 for embed/logits.
struct HookKey {
    int layer = -1;
    int head = -1;
    Site site = Site::embed;
    auto operator<=>(const HookKey&) const = default;
    static HookKey head_site(int l, int h, Site s) { return {l, h, s}; }
    static HookKey layer_site(int l, Site s) { return {l, -1, s}; }
    static HookKey embed_site() { return {-1, -1, Site::embed}; }
};
// The natural hook of a NodeRef's output (result / mlp_out / embed).
HookKey output_hook(const NodeRef& n);

struct LayerWeights {
    std::vector<Tensor> w_q, w_k, w_v, w_o;  // per head; each (d_head, d_model)
    Tensor ln1_g, ln1_b;
    Tensor mlp_w_in, mlp_b_in;    // (d_model, d_hidden), (d_hidden)
    Tensor mlp_w_out, mlp_b_out;  // (d_hidden, d_model), (d_model)
    Tensor ln2_g, ln2_b;
};

struct TransformerModel {
    ModelConfig config;
    Tensor tok_embed;  // (vocab, d_model)
    Tensor pos_embed;  // (max_seq, d_model)
    std::vector<LayerWeights> layers;
    Tensor ln_f_g;   // final layer-norm scale (no shift parameter)
    Tensor unembed;  // (d_model, vocab)

    // Fixed manifest order; the order defines checkpoint payload layout and
    // the parameter hash.
    std::vector<std::pair<std::string, const Tensor*>> named_params() const;
    std::vector<std::pair<std::string, Tensor*>> named_params();
    int64_t param_count() const;
    std::string hash() const;  // sha256 over the payload bytes
};

// Seeded normal init: sigma 0.02, output-facing maps (w_o, mlp_w_out) scaled
// by 1/sqrt(2 n_layers); layer norms at identity.
TransformerModel build_model(const ModelConfig& config);

// Equal-length token rows, padded with BOS past each sample's END.
struct TokenBatch {
    int B = 0;
    int S = 0;
    std::vector<int> tokens;   // B*S
    std::vector<int> end_pos;  // B
    std::vector<int> labels;   // B

    static TokenBatch from_samples(const std::vector<PromptSample>& samples, int pad_to,
                                   int pad_token);
    static TokenBatch single(const PromptSample& s);
};

struct ActivationCache {
    int B = 0, S = 0;
    // [layer][head]
    std::vector<std::vector<Tensor>> q, k, v, z, pattern, result;
    // [layer]
    std::vector<Tensor> mlp_out, resid_pre, resid_mid, resid_post;
    Tensor embed;        // (B,S,D)
    Tensor final_resid;  // == resid_post.back()
    Tensor ln_sigma;     // (B,S) final layer-norm std, for frozen-scale projections
    Tensor logits;       // (B,S,V) when a full-logits run was requested

    const Tensor& site(const HookKey& k) const;
};

struct Intervention {
    HookKey key;
    std::vector<int> positions;  // sequence positions; empty = all
    Tensor value;                // full node-shaped tensor
};

enum class Objective { end_token, full_sequence };

// Reusable forward engine for one model; caches one compute graph per (B,S)
// and rebinds weights on demand. Read-only access to the model; call
// sync_params() after the model's weights change.
class ModelRunner {
public:
    explicit ModelRunner(const TransformerModel& m);
    ~ModelRunner();
    ModelRunner(const ModelRunner&) = delete;
    ModelRunner& operator=(const ModelRunner&) = delete;

    const TransformerModel& model() const { return *model_; }
    void sync_params();

    // Full-sequence logits (B,S,V); cache captured when cache != nullptr.
    Tensor run(const TokenBatch& batch, const std::vector<Intervention>& interventions,
               ActivationCache* cache);

    // END-position logits (B,V) only; honors interventions.
    Tensor run_end_logits(const TokenBatch& batch, const std::vector<Intervention>& interventions);

    // Mean cross-entropy of the teacher token; gradients for every parameter
    // in named_params() order.
    double loss_and_grads(const TokenBatch& batch, Objective objective,
                          std::vector<Tensor>* grads);

private:
    struct Impl;
    const TransformerModel* model_;
    std::unique_ptr<Impl> impl_;
};

std::pair<Tensor, ActivationCache> run_with_cache(const TransformerModel& m,
                                                  const TokenBatch& batch);
Tensor run_with_interventions(const TransformerModel& m, const TokenBatch& batch,
                              const std::vector<Intervention>& interventions,
                              ActivationCache* cache = nullptr);

Tensor ov_matrix(const TransformerModel& m, const HeadRef& h);  // W_V^T W_O, (D,D)
Tensor qk_matrix(const TransformerModel& m, const HeadRef& h);  // W_Q^T W_K, (D,D)

// Frozen-scale projection onto an unembedding column: with v centered and
// scaled by the cached final-LN sigma, dot W_U[:, token].
double unembed_projection(const TransformerModel& m, const std::vector<double>& v, int token,
                          double sigma);
// Row (b, s) of a cached (B,S,D) tensor as a vector.
std::vector<double> cache_row(const Tensor& t, int b, int s);

}  // namespace milab
