#include "mcg/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mcg::net {

using nn::Node;
using nn::Param;
using nn::Tape;
using nn::Tensor;

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

// Pre-norm transformer block. pk/pv are per-layer prefix key/value rows
// (nullptr when unconditioned); causal restricts token i to prefix + tokens
// <= i, otherwise attention is bidirectional over all tokens.
Node* block_forward(Tape& t, const BlockLeaves& b, Node* x, Node* pk, Node* pv, bool causal,
                    int n_heads) {
    const int len = x->val.rows();
    const int d = x->val.cols();
    const int hd = d / n_heads;
    const int p = pk ? pk->val.rows() : 0;

    Node* xn = t.layer_norm(x, b.ln1_g, b.ln1_b);
    Node* q = t.add_bias(t.matmul(xn, b.wq), b.bq);
    Node* k = t.add_bias(t.matmul(xn, b.wk), b.bk);
    Node* v = t.add_bias(t.matmul(xn, b.wv), b.bv);
    Node* kf = pk ? t.concat_rows(pk, k) : k;
    Node* vf = pv ? t.concat_rows(pv, v) : v;

    std::vector<int> valid(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
        valid[static_cast<std::size_t>(i)] = causal ? p + i + 1 : p + len;
    }

    std::vector<Node*> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int h = 0; h < n_heads; ++h) {
        Node* qh = t.slice_cols(q, h * hd, hd);
        Node* kh = t.slice_cols(kf, h * hd, hd);
        Node* vh = t.slice_cols(vf, h * hd, hd);
        Node* scores = t.scale(t.matmul_nt(qh, kh), inv_scale);
        Node* probs = t.masked_softmax_rows(scores, valid);
        heads.push_back(t.matmul(probs, vh));
    }
    Node* ctx = n_heads == 1 ? heads[0] : t.concat_cols(heads);
    x = t.add(x, t.add_bias(t.matmul(ctx, b.wo), b.bo));

    Node* x2 = t.layer_norm(x, b.ln2_g, b.ln2_b);
    Node* ff = t.add_bias(
        t.matmul(t.gelu(t.add_bias(t.matmul(x2, b.wf1), b.bf1)), b.wf2), b.bf2);
    return t.add(x, ff);
}

BlockLeaves bind_block(Tape& t, Block& blk, bool frozen) {
    auto bindp = [&](Param& p) { return frozen ? t.frozen(p) : t.param(p); };
    BlockLeaves b{};
    b.ln1_g = bindp(blk.ln1_g);
    b.ln1_b = bindp(blk.ln1_b);
    b.ln2_g = bindp(blk.ln2_g);
    b.ln2_b = bindp(blk.ln2_b);
    b.wq = bindp(blk.wq);
    b.wk = bindp(blk.wk);
    b.wv = bindp(blk.wv);
    b.wo = bindp(blk.wo);
    b.bq = bindp(blk.bq);
    b.bk = bindp(blk.bk);
    b.bv = bindp(blk.bv);
    b.bo = bindp(blk.bo);
    b.wf1 = bindp(blk.wf1);
    b.bf1 = bindp(blk.bf1);
    b.wf2 = bindp(blk.wf2);
    b.bf2 = bindp(blk.bf2);
    return b;
}

constexpr double kInitStd = 0.02;

}  // namespace

// ----------------------------------------------------------------------------
// Config presets.

nlohmann::json ModelConfig::to_json() const {
    return {
        {"preset", preset},
        {"d_h", d_h},
        {"disent_hidden", disent_hidden},
        {"prefix_hidden", prefix_hidden},
        {"encoder",
         {{"d_model", encoder.d_model},
          {"n_heads", encoder.n_heads},
          {"n_layers", encoder.n_layers},
          {"d_ff", encoder.d_ff},
          {"max_len", encoder.max_len}}},
        {"decoder",
         {{"d_model", decoder.d_model},
          {"n_heads", decoder.n_heads},
          {"n_layers", decoder.n_layers},
          {"d_ff", decoder.d_ff},
          {"max_len", decoder.max_len},
          {"prefix_len", decoder.prefix_len}}},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.d_h = j.at("d_h").get<int>();
    c.disent_hidden = j.at("disent_hidden").get<int>();
    c.prefix_hidden = j.at("prefix_hidden").get<int>();
    const auto& e = j.at("encoder");
    c.encoder = {e.at("d_model"), e.at("n_heads"), e.at("n_layers"), e.at("d_ff"),
                 e.at("max_len")};
    const auto& d = j.at("decoder");
    c.decoder = {d.at("d_model"), d.at("n_heads"), d.at("n_layers"),
                 d.at("d_ff"),    d.at("max_len"), d.at("prefix_len")};
    return c;
}

ModelConfig desk_model_config() {
    return ModelConfig{};
}

ModelConfig paper_model_config() {
    ModelConfig c;
    c.preset = "paper";
    c.d_h = 768;
    c.disent_hidden = 768;
    c.prefix_hidden = 768;
    c.encoder = {768, 12, 12, 3072, 512};
    c.decoder = {1024, 16, 24, 4096, 1024, 20};
    return c;
}

// ----------------------------------------------------------------------------
// Block.

Block::Block(const std::string& name, int d_model, int d_ff, double out_scale, Rng& rng)
    : ln1_g(name + ".ln1_g", Tensor({1, d_model}, 1.0)),
      ln1_b(name + ".ln1_b", Tensor({1, d_model})),
      ln2_g(name + ".ln2_g", Tensor({1, d_model}, 1.0)),
      ln2_b(name + ".ln2_b", Tensor({1, d_model})),
      wq(name + ".wq", Tensor::randn({d_model, d_model}, kInitStd, rng)),
      wk(name + ".wk", Tensor::randn({d_model, d_model}, kInitStd, rng)),
      wv(name + ".wv", Tensor::randn({d_model, d_model}, kInitStd, rng)),
      wo(name + ".wo", Tensor::randn({d_model, d_model}, kInitStd * out_scale, rng)),
      bq(name + ".bq", Tensor({1, d_model})),
      bk(name + ".bk", Tensor({1, d_model})),
      bv(name + ".bv", Tensor({1, d_model})),
      bo(name + ".bo", Tensor({1, d_model})),
      wf1(name + ".wf1", Tensor::randn({d_model, d_ff}, kInitStd, rng)),
      bf1(name + ".bf1", Tensor({1, d_ff})),
      wf2(name + ".wf2", Tensor::randn({d_ff, d_model}, kInitStd * out_scale, rng)),
      bf2(name + ".bf2", Tensor({1, d_model})) {}

void Block::collect(NamedParams& out) {
    for (Param* p : {&ln1_g, &ln1_b, &ln2_g, &ln2_b, &wq, &wk, &wv, &wo, &bq, &bk, &bv, &bo,
                     &wf1, &bf1, &wf2, &bf2}) {
        out.emplace_back(p->name, p);
    }
}

// ----------------------------------------------------------------------------
// Encoder.

Encoder::Encoder(const EncoderConfig& cfg, int vocab_size, Rng rng)
    : cfg_(cfg), vocab_size_(vocab_size) {
    check(cfg.d_model % cfg.n_heads == 0, "encoder: d_model must divide into heads");
    tok_emb_ = Param("enc.tok_emb", Tensor::randn({vocab_size, cfg.d_model}, kInitStd, rng));
    pos_emb_ = Param("enc.pos_emb", Tensor::randn({cfg.max_len, cfg.d_model}, kInitStd, rng));
    lnf_g_ = Param("enc.lnf_g", Tensor({1, cfg.d_model}, 1.0));
    lnf_b_ = Param("enc.lnf_b", Tensor({1, cfg.d_model}));
    const double out_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        blocks_.emplace_back("enc.b" + std::to_string(l), cfg.d_model, cfg.d_ff, out_scale, rng);
    }
}

Encoder::Bound Encoder::bind(Tape& tape, bool frozen) const {
    Bound b{};
    auto bindp = [&](Param& p) { return frozen ? tape.frozen(p) : tape.param(p); };
    b.tok = bindp(tok_emb_);
    b.pos = bindp(pos_emb_);
    b.lnf_g = bindp(lnf_g_);
    b.lnf_b = bindp(lnf_b_);
    for (Block& blk : blocks_) {
        b.blocks.push_back(bind_block(tape, blk, frozen));
    }
    return b;
}

Node* Encoder::forward(Tape& tape, const Bound& b, const TokenIds& ids) const {
    check(!ids.empty(), "encode: empty token sequence");
    check(static_cast<int>(ids.size()) <= cfg_.max_len,
          "encode: sequence exceeds encoder position table");
    Node* x = tape.add(tape.embed(b.tok, ids),
                       tape.slice_rows(b.pos, 0, static_cast<int>(ids.size())));
    for (const BlockLeaves& blk : b.blocks) {
        x = block_forward(tape, blk, x, nullptr, nullptr, /*causal=*/false, cfg_.n_heads);
    }
    x = tape.layer_norm(x, b.lnf_g, b.lnf_b);
    return tape.mean_rows(x);
}

Node* Encoder::forward(Tape& tape, const TokenIds& ids, bool frozen) const {
    return forward(tape, bind(tape, frozen), ids);
}

NamedParams Encoder::named_params() {
    NamedParams out;
    for (Param* p : {&tok_emb_, &pos_emb_, &lnf_g_, &lnf_b_}) {
        out.emplace_back(p->name, p);
    }
    for (Block& b : blocks_) {
        b.collect(out);
    }
    return out;
}

// ----------------------------------------------------------------------------
// Disentangler.

Disentangler::Disentangler(int d_h, int hidden, Rng rng) {
    we1_ = Param("dis.we1", Tensor::randn({d_h, hidden}, kInitStd, rng));
    be1_ = Param("dis.be1", Tensor({1, hidden}));
    we2_ = Param("dis.we2", Tensor::randn({hidden, d_h}, kInitStd, rng));
    be2_ = Param("dis.be2", Tensor({1, d_h}));
    wi1_ = Param("dis.wi1", Tensor::randn({d_h, hidden}, kInitStd, rng));
    bi1_ = Param("dis.bi1", Tensor({1, hidden}));
    wi2_ = Param("dis.wi2", Tensor::randn({hidden, d_h}, kInitStd, rng));
    bi2_ = Param("dis.bi2", Tensor({1, d_h}));
}

Disentangler::Bound Disentangler::bind(Tape& tape, bool frozen) const {
    auto bindp = [&](Param& p) { return frozen ? tape.frozen(p) : tape.param(p); };
    return Bound{bindp(we1_), bindp(be1_), bindp(we2_), bindp(be2_),
                 bindp(wi1_), bindp(bi1_), bindp(wi2_), bindp(bi2_)};
}

Disentangler::Factors Disentangler::forward(Tape& tape, const Bound& b, Node* semantic) const {
    Node* he = tape.add_bias(
        tape.matmul(tape.tanh_(tape.add_bias(tape.matmul(semantic, b.we1), b.be1)), b.we2),
        b.be2);
    Node* hi = tape.add_bias(
        tape.matmul(tape.tanh_(tape.add_bias(tape.matmul(semantic, b.wi1), b.bi1)), b.wi2),
        b.bi2);
    return Factors{he, hi, tape.add(he, hi)};
}

Disentangler::Factors Disentangler::forward(Tape& tape, Node* semantic, bool frozen) const {
    return forward(tape, bind(tape, frozen), semantic);
}

NamedParams Disentangler::named_params() {
    NamedParams out;
    for (Param* p : {&we1_, &be1_, &we2_, &be2_, &wi1_, &bi1_, &wi2_, &bi2_}) {
        out.emplace_back(p->name, p);
    }
    return out;
}

// ----------------------------------------------------------------------------
// PrefixMlp.

PrefixMlp::PrefixMlp(int d_h, int hidden, PrefixShape shape, Rng rng) : shape_(shape) {
    w1_ = Param("pfx.w1", Tensor::randn({d_h, hidden}, kInitStd, rng));
    b1_ = Param("pfx.b1", Tensor({1, hidden}));
    w2_ = Param("pfx.w2", Tensor::randn({hidden, shape.flat()}, kInitStd, rng));
    b2_ = Param("pfx.b2", Tensor({1, shape.flat()}));
}

PrefixMlp::Bound PrefixMlp::bind(Tape& tape, bool frozen) const {
    auto bindp = [&](Param& p) { return frozen ? tape.frozen(p) : tape.param(p); };
    return Bound{bindp(w1_), bindp(b1_), bindp(w2_), bindp(b2_)};
}

Node* PrefixMlp::forward(Tape& tape, const Bound& b, Node* z) const {
    return tape.add_bias(
        tape.matmul(tape.tanh_(tape.add_bias(tape.matmul(z, b.w1), b.b1)), b.w2), b.b2);
}

Node* PrefixMlp::forward(Tape& tape, Node* z, bool frozen) const {
    return forward(tape, bind(tape, frozen), z);
}

NamedParams PrefixMlp::named_params() {
    NamedParams out;
    for (Param* p : {&w1_, &b1_, &w2_, &b2_}) {
        out.emplace_back(p->name, p);
    }
    return out;
}

// ----------------------------------------------------------------------------
// Probe.

Probe::Probe(int aspect, int d_in, int n_attrs, Rng rng) : aspect_(aspect), n_attrs_(n_attrs) {
    w_ = Param("probe.w", Tensor::randn({d_in, n_attrs}, kInitStd, rng));
    b_ = Param("probe.b", Tensor({1, n_attrs}));
}

Probe::Bound Probe::bind(Tape& tape, bool frozen) const {
    auto bindp = [&](Param& p) { return frozen ? tape.frozen(p) : tape.param(p); };
    return Bound{bindp(w_), bindp(b_)};
}

Node* Probe::logits(Tape& tape, const Bound& b, Node* v) const {
    return tape.add_bias(tape.matmul(v, b.w), b.b);
}

std::vector<double> Probe::predict(const Tensor& v) const {
    check(n_attrs_ > 0, "probe_predict: probe is not initialized");
    check(static_cast<int>(v.size()) == w_.value.rows(), "probe_predict: dimension mismatch");
    std::vector<double> logits(static_cast<std::size_t>(n_attrs_));
    for (int c = 0; c < n_attrs_; ++c) {
        double z = b_.value[static_cast<std::size_t>(c)];
        for (int j = 0; j < w_.value.rows(); ++j) {
            z += v[static_cast<std::size_t>(j)] *
                 w_.value[static_cast<std::size_t>(j) * n_attrs_ + c];
        }
        logits[static_cast<std::size_t>(c)] = z;
    }
    std::vector<double> probs(static_cast<std::size_t>(n_attrs_));
    nn::softmax_row(logits.data(), probs.data(), n_attrs_);
    return probs;
}

int Probe::argmax(const Tensor& v) const {
    const auto p = predict(v);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

NamedParams Probe::named_params(const std::string& prefix) {
    w_.name = prefix + ".w";
    b_.name = prefix + ".b";
    return {{w_.name, &w_}, {b_.name, &b_}};
}

// ----------------------------------------------------------------------------
// Decoder.

Decoder::Decoder(const DecoderConfig& cfg, corpus::Vocabulary vocab, Rng rng)
    : cfg_(cfg), vocab_(std::move(vocab)) {
    check(cfg.d_model % cfg.n_heads == 0, "decoder: d_model must divide into heads");
    const int v = vocab_.size();
    tok_emb_ = Param("dec.tok_emb", Tensor::randn({v, cfg.d_model}, kInitStd, rng));
    pos_emb_ = Param("dec.pos_emb", Tensor::randn({cfg.max_len, cfg.d_model}, kInitStd, rng));
    lnf_g_ = Param("dec.lnf_g", Tensor({1, cfg.d_model}, 1.0));
    lnf_b_ = Param("dec.lnf_b", Tensor({1, cfg.d_model}));
    head_w_ = Param("dec.head_w", Tensor::randn({cfg.d_model, v}, kInitStd, rng));
    head_b_ = Param("dec.head_b", Tensor({1, v}));
    const double out_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        blocks_.emplace_back("dec.b" + std::to_string(l), cfg.d_model, cfg.d_ff, out_scale, rng);
    }
}

Decoder::Bound Decoder::bind(Tape& tape, bool frozen) const {
    Bound b{};
    auto bindp = [&](Param& p) { return frozen ? tape.frozen(p) : tape.param(p); };
    b.tok = bindp(tok_emb_);
    b.pos = bindp(pos_emb_);
    b.lnf_g = bindp(lnf_g_);
    b.lnf_b = bindp(lnf_b_);
    b.head_w = bindp(head_w_);
    b.head_b = bindp(head_b_);
    for (Block& blk : blocks_) {
        b.blocks.push_back(bind_block(tape, blk, frozen));
    }
    return b;
}

Node* Decoder::prefix_slice(Tape& tape, Node* flat, int layer, int role) const {
    const int p = cfg_.prefix_len;
    const int d = cfg_.d_model;
    std::vector<std::size_t> idx(static_cast<std::size_t>(p) * d);
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < d; ++j) {
            idx[static_cast<std::size_t>(i) * d + j] =
                static_cast<std::size_t>(((i * cfg_.n_layers + layer) * 2 + role)) * d + j;
        }
    }
    return tape.gather(flat, std::move(idx), {p, d});
}

Node* Decoder::logits(Tape& tape, const Bound& b, Node* prefix_flat, const TokenIds& x) const {
    TokenIds ids;
    ids.reserve(x.size() + 1);
    ids.push_back(vocab_.bos);
    ids.insert(ids.end(), x.begin(), x.end());
    if (static_cast<int>(ids.size()) > cfg_.max_len) {
        throw std::invalid_argument("decoder: sequence exceeds context length");
    }
    if (prefix_flat != nullptr) {
        check(static_cast<int>(prefix_flat->val.size()) == prefix_shape().flat(),
              "decoder: prefix size does not match configuration");
    }

    Node* h = tape.add(tape.embed(b.tok, ids),
                       tape.slice_rows(b.pos, 0, static_cast<int>(ids.size())));
    for (std::size_t l = 0; l < b.blocks.size(); ++l) {
        Node* pk = nullptr;
        Node* pv = nullptr;
        if (prefix_flat != nullptr) {
            pk = prefix_slice(tape, prefix_flat, static_cast<int>(l), 0);
            pv = prefix_slice(tape, prefix_flat, static_cast<int>(l), 1);
        }
        h = block_forward(tape, b.blocks[l], h, pk, pv, /*causal=*/true, cfg_.n_heads);
    }
    h = tape.layer_norm(h, b.lnf_g, b.lnf_b);
    return tape.add_bias(tape.matmul(h, b.head_w), b.head_b);
}

Node* Decoder::nll(Tape& tape, const Bound& b, Node* prefix_flat, const TokenIds& x) const {
    Node* lg = logits(tape, b, prefix_flat, x);
    TokenIds targets(x);
    targets.push_back(vocab_.eos);
    return tape.cross_entropy_rows(lg, targets);
}

double Decoder::logprob(const Tensor& prefix, const TokenIds& x) const {
    Tape tape;
    Bound b = bind(tape, /*frozen=*/true);
    Node* pf = nullptr;
    if (prefix.size() != 0) {
        Tensor p({1, static_cast<int>(prefix.size())});
        p.data = prefix.data;
        pf = tape.constant(std::move(p));
    }
    Node* loss = nll(tape, b, pf, x);
    return -loss->val[0];
}

TokenIds Decoder::greedy(const Tensor& prefix, const TokenIds& prompt, int max_len) const {
    if (static_cast<int>(prompt.size()) + 1 >= cfg_.max_len) {
        throw std::invalid_argument("decoder: prompt does not fit the context");
    }
    check(max_len >= 0, "decoder: negative generation budget");
    TokenIds ids;
    ids.push_back(vocab_.bos);
    ids.insert(ids.end(), prompt.begin(), prompt.end());

    TokenIds generated;
    while (static_cast<int>(generated.size()) < max_len &&
           static_cast<int>(ids.size()) < cfg_.max_len) {
        Tape tape;
        Bound b = bind(tape, /*frozen=*/true);
        Node* pf = nullptr;
        if (prefix.size() != 0) {
            Tensor p({1, static_cast<int>(prefix.size())});
            p.data = prefix.data;
            pf = tape.constant(std::move(p));
        }
        TokenIds body(ids.begin() + 1, ids.end());
        Node* lg = logits(tape, b, pf, body);
        const int rows = lg->val.rows();
        const int v = lg->val.cols();
        const double* last = lg->val.ptr() + static_cast<std::size_t>(rows - 1) * v;
        int best = 0;
        for (int j = 1; j < v; ++j) {
            if (last[j] > last[best]) {
                best = j;  // ties keep the lowest token id
            }
        }
        if (best == vocab_.eos) {
            break;
        }
        ids.push_back(best);
        generated.push_back(best);
    }
    return generated;
}

NamedParams Decoder::named_params() {
    NamedParams out;
    for (Param* p : {&tok_emb_, &pos_emb_, &lnf_g_, &lnf_b_, &head_w_, &head_b_}) {
        out.emplace_back(p->name, p);
    }
    for (Block& b : blocks_) {
        b.collect(out);
    }
    return out;
}

std::uint64_t Decoder::param_digest() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& [name, p] : const_cast<Decoder*>(this)->named_params()) {
        h = fnv1a(name, h);
        h = fnv1a(p->value.data, h);
    }
    return h;
}

// ----------------------------------------------------------------------------
// Model.

Model::Model(const ModelConfig& cfg, const corpus::AttributeSchema& schema,
             corpus::Vocabulary vocab, std::uint64_t seed)
    : cfg_(cfg), schema_(schema), vocab_(std::move(vocab)) {
    schema_.validate();
    check(cfg_.encoder.d_model == cfg_.d_h, "model: encoder width must equal d_h");
    implicit_aspect_ = schema_.implicit_aspect();
    Rng root(seed);
    {
        Rng r = root.derive("encoder");
        encoder_ = Encoder(cfg_.encoder, vocab_.size(), r);
    }
    {
        Rng r = root.derive("disentangler");
        disent_ = Disentangler(cfg_.d_h, cfg_.disent_hidden, r);
    }
    {
        Rng r = root.derive("prefix-mlp");
        prefix_mlp_ = PrefixMlp(cfg_.d_h, cfg_.prefix_hidden, cfg_.prefix_shape(), r);
    }
    for (int t = 0; t < schema_.n_aspects(); ++t) {
        Rng r = root.derive("z-probe-" + std::to_string(t));
        z_probes_.emplace_back(t, cfg_.d_h, schema_.n_attrs(t), r);
    }
    for (int t = 0; t < schema_.n_aspects(); ++t) {
        if (t == implicit_aspect_) {
            continue;
        }
        Rng r = root.derive("mu-probe-" + std::to_string(t));
        mu_probes_.emplace(t, Probe(t, cfg_.d_h, schema_.n_attrs(t), r));
    }
    if (implicit_aspect_ >= 0) {
        Rng r = root.derive("sigma-probe");
        sigma_probe_ = Probe(implicit_aspect_, cfg_.d_h, schema_.n_attrs(implicit_aspect_), r);
    }
}

Probe& Model::z_probe(int aspect) {
    check(aspect >= 0 && aspect < static_cast<int>(z_probes_.size()),
          "z_probe: unknown aspect");
    return z_probes_[static_cast<std::size_t>(aspect)];
}

const Probe& Model::z_probe(int aspect) const {
    return const_cast<Model*>(this)->z_probe(aspect);
}

Probe& Model::mu_probe(int aspect) {
    auto it = mu_probes_.find(aspect);
    check(it != mu_probes_.end(), "mu_probe: no explicit-factor probe for the aspect");
    return it->second;
}

const Probe& Model::mu_probe(int aspect) const {
    return const_cast<Model*>(this)->mu_probe(aspect);
}

Probe& Model::sigma_probe() {
    check(implicit_aspect_ >= 0, "sigma_probe: schema has no implicit-annotated aspect");
    return sigma_probe_;
}

const Probe& Model::sigma_probe() const {
    return const_cast<Model*>(this)->sigma_probe();
}

Tensor Model::encode(const std::vector<std::string>& text) const {
    Tape tape;
    Node* h = encoder_.forward(tape, vocab_.encode(text), /*frozen=*/true);
    return h->val;
}

Model::FactorsValue Model::disentangle(const Tensor& semantic) const {
    check(static_cast<int>(semantic.size()) == cfg_.d_h, "disentangle: dimension mismatch");
    check(semantic.all_finite(), "disentangle: non-finite semantic feature");
    Tape tape;
    Tensor s({1, cfg_.d_h});
    s.data = semantic.data;
    auto f = disent_.forward(tape, tape.constant(std::move(s)), /*frozen=*/true);
    return FactorsValue{f.h_explicit->val, f.h_implicit->val, f.z->val};
}

Tensor Model::compute_prefix(const Tensor& z, double lambda, std::uint64_t noise_seed) const {
    check(lambda >= 0.0, "compute_prefix: lambda must be non-negative");
    check(static_cast<int>(z.size()) == cfg_.d_h, "compute_prefix: dimension mismatch");
    Tensor zin({1, cfg_.d_h});
    zin.data = z.data;
    if (lambda > 0.0) {
        Rng rng = seeded_rng(noise_seed, "prefix-eps");
        for (auto& x : zin.data) {
            x += lambda * rng.gauss();
        }
    }
    Tape tape;
    Node* out = prefix_mlp_.forward(tape, tape.constant(std::move(zin)), /*frozen=*/true);
    Tensor prefix(cfg_.prefix_shape().dims());
    prefix.data = out->val.data;
    return prefix;
}

std::vector<double> Model::probe_predict(const Tensor& v, int aspect) const {
    return z_probe(aspect).predict(v);
}

NamedParams Model::named_params() {
    NamedParams out = encoder_.named_params();
    for (auto& [n, p] : disent_.named_params()) out.emplace_back(n, p);
    for (auto& [n, p] : prefix_mlp_.named_params()) out.emplace_back(n, p);
    for (std::size_t t = 0; t < z_probes_.size(); ++t) {
        for (auto& [n, p] : z_probes_[t].named_params("zp." + std::to_string(t))) {
            out.emplace_back(n, p);
        }
    }
    for (auto& [t, probe] : mu_probes_) {
        for (auto& [n, p] : probe.named_params("mup." + std::to_string(t))) {
            out.emplace_back(n, p);
        }
    }
    if (implicit_aspect_ >= 0) {
        for (auto& [n, p] : sigma_probe_.named_params("sgp")) {
            out.emplace_back(n, p);
        }
    }
    return out;
}

nn::ParamRefs Model::trainable_params() {
    nn::ParamRefs out;
    for (auto& [n, p] : named_params()) {
        out.push_back(p);
    }
    return out;
}

// ----------------------------------------------------------------------------
// Decoder pretraining.

PretrainStats pretrain_decoder(Decoder& decoder, const std::vector<TokenIds>& train_texts,
                               const std::vector<TokenIds>& heldout_texts,
                               const PretrainConfig& cfg) {
    if (train_texts.empty()) {
        throw std::invalid_argument("pretrain_decoder: empty corpus");
    }
    nn::AdamW opt(nn::AdamWConfig{.lr = cfg.lr, .weight_decay = 0.01});
    nn::ParamRefs params;
    for (auto& [n, p] : decoder.named_params()) {
        params.push_back(p);
    }

    Rng order_rng = seeded_rng(cfg.seed, "pretrain-order");
    std::vector<std::size_t> order(train_texts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    PretrainStats stats;
    double epoch_nll = 0.0;
    long epoch_tokens = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        epoch_nll = 0.0;
        epoch_tokens = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Tape tape;
            Decoder::Bound bound = decoder.bind(tape, /*frozen=*/false);
            std::vector<Node*> losses;
            long batch_tokens = 0;
            for (std::size_t oi = start; oi < stop; ++oi) {
                const TokenIds& x = train_texts[order[oi]];
                losses.push_back(decoder.nll(tape, bound, nullptr, x));
                batch_tokens += static_cast<long>(x.size()) + 1;
            }
            Node* total = tape.add_scalars(losses);
            // Mean per sequence keeps gradient scale independent of batch size.
            Node* scaled = tape.scale(total, 1.0 / static_cast<double>(stop - start));
            tape.backward(scaled);
            tape.harvest();
            opt.step(params);
            ++stats.steps;
            epoch_nll += total->val[0];
            epoch_tokens += batch_tokens;
        }
    }
    stats.final_train_nll_per_token =
        epoch_tokens > 0 ? epoch_nll / static_cast<double>(epoch_tokens) : 0.0;

    double held_nll = 0.0;
    long held_tokens = 0;
    for (const TokenIds& x : heldout_texts) {
        held_nll -= decoder.logprob(Tensor{}, x);
        held_tokens += static_cast<long>(x.size()) + 1;
    }
    stats.heldout_perplexity =
        held_tokens > 0 ? std::exp(held_nll / static_cast<double>(held_tokens)) : 0.0;
    return stats;
}

// ----------------------------------------------------------------------------
// Checkpoints.

void save_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                     const nlohmann::json& config, const NamedParams& params,
                     const std::string& schema_hash, const std::vector<std::string>& vocab,
                     const std::string& corpus_digest, const std::string& run_config_digest,
                     const nlohmann::json& extra) {
    std::filesystem::create_directories(dir);
    std::string blob;
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, p] : params) {
        tensors.push_back({{"name", name},
                           {"shape", p->value.shape},
                           {"offset", offset},
                           {"count", p->value.size()}});
        const char* bytes = reinterpret_cast<const char*>(p->value.data.data());
        blob.append(bytes, p->value.size() * sizeof(double));
        offset += p->value.size();
    }
    nlohmann::json manifest;
    manifest["format"] = "mcg-checkpoint";
    manifest["version"] = 1;
    manifest["kind"] = kind;
    manifest["config"] = config;
    manifest["schema_hash"] = schema_hash;
    manifest["vocab"] = vocab;
    manifest["corpus_digest"] = corpus_digest;
    manifest["run_config_digest"] = run_config_digest;
    manifest["tensors"] = std::move(tensors);
    manifest["tensor_digest"] = to_hex(fnv1a(blob.data(), blob.size()));
    manifest["extra"] = extra;

    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
    write_text_file(dir / "tensors.bin", blob);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
    const nlohmann::json manifest =
        nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    if (manifest.at("format").get<std::string>() != "mcg-checkpoint") {
        throw std::runtime_error("checkpoint: unrecognized manifest format");
    }
    CheckpointInfo info;
    info.kind = manifest.at("kind").get<std::string>();
    info.config = manifest.at("config");
    info.schema_hash = manifest.at("schema_hash").get<std::string>();
    info.vocab = manifest.at("vocab").get<std::vector<std::string>>();
    info.corpus_digest = manifest.at("corpus_digest").get<std::string>();
    info.run_config_digest = manifest.at("run_config_digest").get<std::string>();
    info.tensor_digest = manifest.at("tensor_digest").get<std::string>();
    info.extra = manifest.value("extra", nlohmann::json::object());
    return info;
}

CheckpointInfo load_checkpoint(const std::filesystem::path& dir, const NamedParams& params) {
    const nlohmann::json manifest =
        nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    const std::string blob = read_text_file(dir / "tensors.bin");
    if (to_hex(fnv1a(blob.data(), blob.size())) !=
        manifest.at("tensor_digest").get<std::string>()) {
        throw std::runtime_error("checkpoint: tensor digest mismatch (corrupt or truncated)");
    }
    std::map<std::string, nlohmann::json> table;
    for (const auto& t : manifest.at("tensors")) {
        table[t.at("name").get<std::string>()] = t;
    }
    for (const auto& [name, p] : params) {
        auto it = table.find(name);
        if (it == table.end()) {
            throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
        }
        const auto shape = it->second.at("shape").get<std::vector<int>>();
        if (shape != p->value.shape) {
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        }
        const std::size_t offset = it->second.at("offset").get<std::size_t>();
        const std::size_t count = it->second.at("count").get<std::size_t>();
        if ((offset + count) * sizeof(double) > blob.size()) {
            throw std::runtime_error("checkpoint: tensor data out of range for '" + name + "'");
        }
        std::memcpy(p->value.data.data(), blob.data() + offset * sizeof(double),
                    count * sizeof(double));
    }
    CheckpointInfo info = read_checkpoint_info(dir);
    return info;
}

void save_decoder(const std::filesystem::path& dir, Decoder& decoder,
                  const std::string& schema_hash, const std::string& corpus_digest,
                  const std::string& run_config_digest) {
    const DecoderConfig& c = decoder.config();
    nlohmann::json config = {{"d_model", c.d_model}, {"n_heads", c.n_heads},
                             {"n_layers", c.n_layers}, {"d_ff", c.d_ff},
                             {"max_len", c.max_len},  {"prefix_len", c.prefix_len}};
    save_checkpoint(dir, "decoder", config, decoder.named_params(), schema_hash,
                    decoder.vocab().tokens, corpus_digest, run_config_digest);
}

Decoder load_decoder(const std::filesystem::path& dir) {
    const CheckpointInfo info = read_checkpoint_info(dir);
    if (info.kind != "decoder") {
        throw std::runtime_error("load_decoder: checkpoint kind is '" + info.kind + "'");
    }
    DecoderConfig cfg{info.config.at("d_model"), info.config.at("n_heads"),
                      info.config.at("n_layers"), info.config.at("d_ff"),
                      info.config.at("max_len"),  info.config.at("prefix_len")};
    Decoder dec(cfg, corpus::Vocabulary::from_tokens(info.vocab), Rng(0));
    load_checkpoint(dir, dec.named_params());
    return dec;
}

void save_model(const std::filesystem::path& dir, Model& model,
                const std::string& corpus_digest, const std::string& run_config_digest,
                const nlohmann::json& extra) {
    nlohmann::json config;
    config["model"] = model.config().to_json();
    config["schema"] = model.schema().to_json();
    save_checkpoint(dir, "model", config, model.named_params(), model.schema().hash(),
                    model.vocab().tokens, corpus_digest, run_config_digest, extra);
}

Model load_model(const std::filesystem::path& dir) {
    const CheckpointInfo info = read_checkpoint_info(dir);
    if (info.kind != "model") {
        throw std::runtime_error("load_model: checkpoint kind is '" + info.kind + "'");
    }
    Model model(ModelConfig::from_json(info.config.at("model")),
                corpus::AttributeSchema::from_json(info.config.at("schema")),
                corpus::Vocabulary::from_tokens(info.vocab), /*seed=*/0);
    load_checkpoint(dir, model.named_params());
    return model;
}

}  // namespace mcg::net
