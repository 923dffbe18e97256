#pragma once

// Neural components: a trainable transformer encoder, the explicit/implicit
// control-factor extractors, the latent-to-prefix mapper, per-aspect attribute
// probes, and a tiny autoregressive decoder that is pretrained once and then
// frozen. Training code binds each component's parameters to a tape once per
// step and reuses the bound leaves across the batch; each operation also has
// a plain inference wrapper.

#include <map>
#include <string>
#include <vector>

#include "mcg/autodiff.hpp"
#include "mcg/corpus.hpp"
#include "mcg/optim.hpp"
#include "mcg/schema.hpp"

namespace mcg::net {

using TokenIds = std::vector<int>;
using NamedParams = std::vector<std::pair<std::string, nn::Param*>>;

struct EncoderConfig {
    int d_model = 32;
    int n_heads = 4;
    int n_layers = 1;
    int d_ff = 128;
    int max_len = 32;
};

struct DecoderConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int d_ff = 256;
    int max_len = 64;
    int prefix_len = 4;
};

struct PrefixShape {
    int prefix_len = 0;
    int n_layers = 0;
    int d_model = 0;

    int flat() const { return prefix_len * n_layers * 2 * d_model; }
    std::vector<int> dims() const { return {prefix_len, n_layers, 2, d_model}; }
};

struct ModelConfig {
    std::string preset = "desk";
    int d_h = 32;            // latent dimension; equals the encoder width
    int disent_hidden = 64;  // control-factor extractor hidden width
    int prefix_hidden = 128;
    EncoderConfig encoder;
    DecoderConfig decoder;

    PrefixShape prefix_shape() const {
        return {decoder.prefix_len, decoder.n_layers, decoder.d_model};
    }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

ModelConfig desk_model_config();
// Full-scale configuration preset: documents fidelity targets (latent width
// 768, prefix block (20, 24, 2, 1024)); not intended to be trained in tests.
ModelConfig paper_model_config();

// ----------------------------------------------------------------------------
// Transformer building block shared by encoder and decoder.

struct Block {
    nn::Param ln1_g, ln1_b, ln2_g, ln2_b;
    nn::Param wq, wk, wv, wo, bq, bk, bv, bo;
    nn::Param wf1, bf1, wf2, bf2;

    Block() = default;
    Block(const std::string& name, int d_model, int d_ff, double out_scale, Rng& rng);
    void collect(NamedParams& out);
};

struct BlockLeaves {
    nn::Node *ln1_g, *ln1_b, *ln2_g, *ln2_b;
    nn::Node *wq, *wk, *wv, *wo, *bq, *bk, *bv, *bo;
    nn::Node *wf1, *bf1, *wf2, *bf2;
};

// ----------------------------------------------------------------------------
// Encoder: bidirectional transformer, mean-pooled final states.

class Encoder {
public:
    struct Bound {
        nn::Node *tok, *pos, *lnf_g, *lnf_b;
        std::vector<BlockLeaves> blocks;
    };

    Encoder() = default;
    Encoder(const EncoderConfig& cfg, int vocab_size, Rng rng);

    Bound bind(nn::Tape& tape, bool frozen = false) const;
    // [1, d_model] pooled semantic feature.
    nn::Node* forward(nn::Tape& tape, const Bound& b, const TokenIds& ids) const;
    nn::Node* forward(nn::Tape& tape, const TokenIds& ids, bool frozen = false) const;

    const EncoderConfig& config() const { return cfg_; }
    int vocab_size() const { return vocab_size_; }
    NamedParams named_params();

private:
    EncoderConfig cfg_;
    int vocab_size_ = 0;
    mutable nn::Param tok_emb_, pos_emb_, lnf_g_, lnf_b_;
    mutable std::vector<Block> blocks_;
};

// ----------------------------------------------------------------------------
// Control-factor extractors: two distinct MLPs over the semantic feature.
// The latent vector is their exact elementwise sum.

class Disentangler {
public:
    struct Bound {
        nn::Node *we1, *be1, *we2, *be2;
        nn::Node *wi1, *bi1, *wi2, *bi2;
    };
    struct Factors {
        nn::Node* h_explicit;
        nn::Node* h_implicit;
        nn::Node* z;  // add(h_explicit, h_implicit)
    };

    Disentangler() = default;
    Disentangler(int d_h, int hidden, Rng rng);

    Bound bind(nn::Tape& tape, bool frozen = false) const;
    Factors forward(nn::Tape& tape, const Bound& b, nn::Node* semantic) const;
    Factors forward(nn::Tape& tape, nn::Node* semantic, bool frozen = false) const;

    NamedParams named_params();

private:
    mutable nn::Param we1_, be1_, we2_, be2_;  // explicit-factor extractor
    mutable nn::Param wi1_, bi1_, wi2_, bi2_;  // implicit-factor extractor
};

// ----------------------------------------------------------------------------
// Latent-to-prefix mapper.

class PrefixMlp {
public:
    struct Bound {
        nn::Node *w1, *b1, *w2, *b2;
    };

    PrefixMlp() = default;
    PrefixMlp(int d_h, int hidden, PrefixShape shape, Rng rng);

    Bound bind(nn::Tape& tape, bool frozen = false) const;
    nn::Node* forward(nn::Tape& tape, const Bound& b, nn::Node* z) const;  // [1, flat]
    nn::Node* forward(nn::Tape& tape, nn::Node* z, bool frozen = false) const;
    const PrefixShape& shape() const { return shape_; }

    NamedParams named_params();

private:
    PrefixShape shape_;
    mutable nn::Param w1_, b1_, w2_, b2_;
};

// ----------------------------------------------------------------------------
// Per-aspect linear probe with softmax output.

class Probe {
public:
    struct Bound {
        nn::Node *w, *b;
    };

    Probe() = default;
    Probe(int aspect, int d_in, int n_attrs, Rng rng);

    Bound bind(nn::Tape& tape, bool frozen = false) const;
    nn::Node* logits(nn::Tape& tape, const Bound& b, nn::Node* v) const;
    std::vector<double> predict(const nn::Tensor& v) const;  // softmax probabilities
    int argmax(const nn::Tensor& v) const;

    int aspect() const { return aspect_; }
    int n_attrs() const { return n_attrs_; }
    NamedParams named_params(const std::string& prefix);

private:
    int aspect_ = -1;
    int n_attrs_ = 0;
    mutable nn::Param w_, b_;
};

// ----------------------------------------------------------------------------
// Frozen autoregressive decoder with prefix conditioning.

class Decoder {
public:
    struct Bound {
        nn::Node *tok, *pos, *lnf_g, *lnf_b, *head_w, *head_b;
        std::vector<BlockLeaves> blocks;
    };

    Decoder() = default;
    Decoder(const DecoderConfig& cfg, corpus::Vocabulary vocab, Rng rng);

    Bound bind(nn::Tape& tape, bool frozen = true) const;

    // Logits for positions of [bos, x_0 .. x_{n-1}]; row i scores token i's
    // successor. prefix_flat is a [1, prefix shape flat] node or nullptr.
    nn::Node* logits(nn::Tape& tape, const Bound& b, nn::Node* prefix_flat,
                     const TokenIds& x) const;

    // Sum over positions of -log p(x_t | prefix, x_<t), with <eos> appended as
    // the final target. With a frozen bind, gradients reach the prefix only.
    nn::Node* nll(nn::Tape& tape, const Bound& b, nn::Node* prefix_flat,
                  const TokenIds& x) const;

    // Inference wrappers.
    double logprob(const nn::Tensor& prefix, const TokenIds& x) const;
    TokenIds greedy(const nn::Tensor& prefix, const TokenIds& prompt, int max_len) const;

    const DecoderConfig& config() const { return cfg_; }
    const corpus::Vocabulary& vocab() const { return vocab_; }
    PrefixShape prefix_shape() const { return {cfg_.prefix_len, cfg_.n_layers, cfg_.d_model}; }

    NamedParams named_params();
    // Digest over all parameter values; constant while the decoder is frozen.
    std::uint64_t param_digest() const;

private:
    nn::Node* prefix_slice(nn::Tape& tape, nn::Node* flat, int layer, int role) const;

    DecoderConfig cfg_;
    corpus::Vocabulary vocab_;
    mutable nn::Param tok_emb_, pos_emb_, lnf_g_, lnf_b_, head_w_, head_b_;
    mutable std::vector<Block> blocks_;
};

// ----------------------------------------------------------------------------
// Model bundle: everything trainable in the downstream stage.

class Model {
public:
    Model() = default;
    Model(const ModelConfig& cfg, const corpus::AttributeSchema& schema,
          corpus::Vocabulary vocab, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    const corpus::AttributeSchema& schema() const { return schema_; }
    const corpus::Vocabulary& vocab() const { return vocab_; }

    Encoder& encoder() { return encoder_; }
    const Encoder& encoder() const { return encoder_; }
    Disentangler& disentangler() { return disent_; }
    const Disentangler& disentangler() const { return disent_; }
    PrefixMlp& prefix_mlp() { return prefix_mlp_; }
    const PrefixMlp& prefix_mlp() const { return prefix_mlp_; }

    Probe& z_probe(int aspect);
    const Probe& z_probe(int aspect) const;
    Probe& mu_probe(int aspect);  // explicit-factor probe for a non-implicit aspect
    const Probe& mu_probe(int aspect) const;
    Probe& sigma_probe();  // implicit-factor probe
    const Probe& sigma_probe() const;
    int implicit_aspect() const { return implicit_aspect_; }

    // --- inference-level operations ---
    nn::Tensor encode(const std::vector<std::string>& text) const;  // [1, d_h]
    struct FactorsValue {
        nn::Tensor h_explicit;
        nn::Tensor h_implicit;
        nn::Tensor z;
    };
    FactorsValue disentangle(const nn::Tensor& semantic) const;
    // Prefix = MLP(Z + lambda * eps), eps standard normal from noise_seed;
    // lambda 0 makes the result a pure function of Z.
    nn::Tensor compute_prefix(const nn::Tensor& z, double lambda,
                              std::uint64_t noise_seed) const;
    std::vector<double> probe_predict(const nn::Tensor& v, int aspect) const;

    NamedParams named_params();
    nn::ParamRefs trainable_params();

private:
    ModelConfig cfg_;
    corpus::AttributeSchema schema_;
    corpus::Vocabulary vocab_;
    int implicit_aspect_ = -1;
    Encoder encoder_;
    Disentangler disent_;
    PrefixMlp prefix_mlp_;
    std::vector<Probe> z_probes_;
    std::map<int, Probe> mu_probes_;
    Probe sigma_probe_;
};

// ----------------------------------------------------------------------------
// Decoder pretraining.

struct PretrainConfig {
    int epochs = 8;
    int batch_size = 32;
    double lr = 3e-3;
    std::uint64_t seed = 0;
};

struct PretrainStats {
    double final_train_nll_per_token = 0.0;
    double heldout_perplexity = 0.0;
    long steps = 0;
};

// Trains a decoder as a plain language model (no prefix) on `train_texts`,
// then returns stats; the caller treats the decoder as frozen afterwards.
// Throws on an empty corpus.
PretrainStats pretrain_decoder(Decoder& decoder, const std::vector<TokenIds>& train_texts,
                               const std::vector<TokenIds>& heldout_texts,
                               const PretrainConfig& cfg);

// ----------------------------------------------------------------------------
// Checkpoints: manifest.json + tensors.bin (raw little-endian doubles).

struct CheckpointInfo {
    std::string kind;  // "model" | "decoder"
    nlohmann::json config;
    std::string schema_hash;
    std::vector<std::string> vocab;
    std::string corpus_digest;
    std::string run_config_digest;
    std::string tensor_digest;
    nlohmann::json extra;
};

void save_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                     const nlohmann::json& config, const NamedParams& params,
                     const std::string& schema_hash, const std::vector<std::string>& vocab,
                     const std::string& corpus_digest, const std::string& run_config_digest,
                     const nlohmann::json& extra = nlohmann::json::object());

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
// Loads tensor values into the given params; shape or digest mismatch throws.
CheckpointInfo load_checkpoint(const std::filesystem::path& dir, const NamedParams& params);

// Convenience wrappers that reconstruct the objects from their manifests.
void save_decoder(const std::filesystem::path& dir, Decoder& decoder,
                  const std::string& schema_hash, const std::string& corpus_digest,
                  const std::string& run_config_digest);
Decoder load_decoder(const std::filesystem::path& dir);

void save_model(const std::filesystem::path& dir, Model& model,
                const std::string& corpus_digest, const std::string& run_config_digest,
                const nlohmann::json& extra = nlohmann::json::object());
Model load_model(const std::filesystem::path& dir);

}  // namespace mcg::net
