#include "wmlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace wmlab {

int ModelConfig::max_positions() const {
  return std::max(2 * context_len, plan_tokens()) + 2;
}

void ModelConfig::validate() const {
  if (obs_dims.empty() || obs_dims.size() != action_spaces.size())
    throw std::invalid_argument("model config: obs_dims/action_spaces mismatch");
  if (latent_dim < 1 || n_layers < 1 || n_heads < 1 || encoder_hidden < 1)
    throw std::invalid_argument("model config: non-positive dimension");
  if (width() % n_heads != 0)
    throw std::invalid_argument("model config: width not divisible by heads");
  if (latent_norm == LatentNorm::kSimNorm &&
      (simnorm_group < 1 || latent_dim % simnorm_group != 0))
    throw std::invalid_argument("model config: simnorm group must divide latent");
  if (backbone == Backbone::kMoe && n_experts < 1)
    throw std::invalid_argument("model config: moe needs >= 1 expert");
  if (support.bins < 3 || support.bins % 2 == 0)
    throw std::invalid_argument("model config: support bins must be odd, >= 3");
  if (support.hi <= support.lo)
    throw std::invalid_argument("model config: bad support range");
  if (context_len < 1 || infer_context < 1)
    throw std::invalid_argument("model config: bad context length");
  for (int d : obs_dims)
    if (d < 1) throw std::invalid_argument("model config: bad obs dim");
  for (const auto& sp : action_spaces) {
    if (sp.discrete && sp.n < 1)
      throw std::invalid_argument("model config: bad action count");
    if (!sp.discrete && (sp.dim < 1 || sp.hi <= sp.lo))
      throw std::invalid_argument("model config: bad action space");
  }
}

WorldModel::WorldModel(ModelConfig cfg, uint64_t seed)
    : cfg_(std::move(cfg)), routing_(10000) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  const int w = cfg_.width();
  const int k = cfg_.n_tasks();

  if (cfg_.task_embed_dim > 0) {
    task_embed_ = ps_.create("task_embed", {k, cfg_.task_embed_dim});
    init_normal_fanin(task_embed_, cfg_.task_embed_dim, rng);
    in_proj_ = make_linear(ps_, "in_proj",
                           cfg_.latent_dim + cfg_.task_embed_dim,
                           cfg_.latent_dim, rng);
  }
  pos_ = ps_.create("pos", {cfg_.max_positions(), w});
  init_normal_fanin(pos_, w, rng);

  for (int t = 0; t < k; ++t) {
    const std::string n = "enc" + std::to_string(t);
    encoders_.push_back(make_mlp(
        ps_, n, {cfg_.obs_dims[t], cfg_.encoder_hidden, cfg_.latent_dim}, rng));
    if (cfg_.latent_norm == LatentNorm::kLayerNorm) {
      Tensor g = ps_.create(n + ".ln.g", {cfg_.latent_dim});
      std::fill(g.value().begin(), g.value().end(), 1.0);
      enc_ln_g_.push_back(g);
      enc_ln_b_.push_back(ps_.create(n + ".ln.b", {cfg_.latent_dim}));
    }
  }

  act_embed_.resize(k);
  act_linear_.resize(k);
  for (int t = 0; t < k; ++t) {
    const auto& sp = cfg_.action_spaces[t];
    const std::string n = "act" + std::to_string(t);
    if (sp.discrete) {
      act_embed_[t] = ps_.create(n, {sp.n, cfg_.latent_dim});
      init_normal_fanin(act_embed_[t], cfg_.latent_dim, rng);
    } else {
      act_linear_[t] = make_linear(ps_, n, sp.dim, cfg_.latent_dim, rng);
    }
  }

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string n = "blocks." + std::to_string(l);
    Block b;
    b.ln1_g = ps_.create(n + ".ln1.g", {w});
    std::fill(b.ln1_g.value().begin(), b.ln1_g.value().end(), 1.0);
    b.ln1_b = ps_.create(n + ".ln1.b", {w});
    b.ln2_g = ps_.create(n + ".ln2.g", {w});
    std::fill(b.ln2_g.value().begin(), b.ln2_g.value().end(), 1.0);
    b.ln2_b = ps_.create(n + ".ln2.b", {w});
    b.q = make_adapted_linear(ps_, n + ".attn.q", w, w, rng);
    b.k = make_adapted_linear(ps_, n + ".attn.k", w, w, rng);
    b.v = make_adapted_linear(ps_, n + ".attn.v", w, w, rng);
    b.o = make_adapted_linear(ps_, n + ".attn.o", w, w, rng);
    if (cfg_.backbone == Backbone::kDense)
      b.ffn = make_mlp(ps_, n + ".ffn", {w, cfg_.ffn_hidden, w}, rng);
    else
      b.moe = make_moe_ffn(ps_, n + ".moe", w, cfg_.expert_hidden,
                           cfg_.n_experts, l, rng);
    blocks_.push_back(std::move(b));
  }

  final_ln_g_ = ps_.create("final_ln.g", {w});
  std::fill(final_ln_g_.value().begin(), final_ln_g_.value().end(), 1.0);
  final_ln_b_ = ps_.create("final_ln.b", {w});

  zhead_ = make_linear(ps_, "zhead", w, cfg_.latent_dim, rng);
  if (cfg_.latent_norm == LatentNorm::kLayerNorm) {
    zhead_ln_g_ = ps_.create("zhead.ln.g", {cfg_.latent_dim});
    std::fill(zhead_ln_g_.value().begin(), zhead_ln_g_.value().end(), 1.0);
    zhead_ln_b_ = ps_.create("zhead.ln.b", {cfg_.latent_dim});
  }

  for (int t = 0; t < k; ++t) {
    const std::string n = "head" + std::to_string(t);
    const auto& sp = cfg_.action_spaces[t];
    const int pol_out = sp.discrete ? sp.n : 2 * sp.dim;
    policy_heads_.push_back(make_linear(ps_, n + ".policy", w, pol_out, rng));
    value_heads_.push_back(make_linear(ps_, n + ".value", w, cfg_.support.bins, rng));
    reward_heads_.push_back(make_linear(ps_, n + ".reward", w, cfg_.support.bins, rng));
  }
}

std::vector<AdaptedLinear*> WorldModel::adapted_linears() {
  std::vector<AdaptedLinear*> out;
  for (auto& b : blocks_) {
    out.push_back(&b.q);
    out.push_back(&b.k);
    out.push_back(&b.v);
    out.push_back(&b.o);
  }
  return out;
}

std::vector<std::string> WorldModel::freeze_prefixes() {
  return {"blocks.", "pos", "final_ln.", "in_proj"};
}

Tensor WorldModel::normalize_latent(const Tensor& z, const Tensor& g,
                                    const Tensor& b) const {
  if (cfg_.latent_norm == LatentNorm::kSimNorm)
    return simnorm(z, cfg_.simnorm_group, cfg_.simnorm_tau);
  return layer_norm_rows(z, g, b);
}

Tensor WorldModel::encode(int task, const std::vector<double>& obs,
                          ProbeSink* probe) {
  if (static_cast<int>(obs.size()) != cfg_.obs_dims.at(task))
    throw std::invalid_argument("encode: obs size mismatch");
  Tensor x = Tensor::from(std::vector<double>(obs),
                          {1, cfg_.obs_dims[task]});
  Tensor z = encoders_[task].forward(x);
  z = cfg_.latent_norm == LatentNorm::kLayerNorm
          ? normalize_latent(z, enc_ln_g_[task], enc_ln_b_[task])
          : normalize_latent(z, {}, {});
  if (probe) probe->encoder_outputs.push_back(z);
  return z;
}

Seq WorldModel::begin_seq(int task, bool plan_mode) const {
  Seq s;
  s.task = task;
  s.plan_mode = plan_mode;
  s.step = routing_step_;
  s.kc.assign(cfg_.n_layers, std::vector<std::vector<Tensor>>(cfg_.n_heads));
  s.vc.assign(cfg_.n_layers, std::vector<std::vector<Tensor>>(cfg_.n_heads));
  return s;
}

Tensor WorldModel::token_row(int task, const Tensor& core_row) {
  if (cfg_.task_embed_dim == 0) return core_row;
  Tensor te = gather_rows(task_embed_, {task});
  return in_proj_.forward(concat_cols({core_row, te}));
}

Tensor WorldModel::append_row(Seq& s, const Tensor& row, ProbeSink* probe) {
  if (s.plan_mode && s.len == cfg_.plan_tokens()) {
    // slide: rebuild from the last infer_context (state, action) pairs
    const int keep = 2 * cfg_.infer_context;
    std::vector<std::vector<double>> tail(s.raw.end() - keep, s.raw.end());
    Seq fresh = begin_seq(s.task, true);
    fresh.step = s.step;
    for (auto& r : tail)
      append_row(fresh, Tensor::from(std::move(r), {1, cfg_.width()}), nullptr);
    s = std::move(fresh);
  }
  if (s.len >= cfg_.max_positions())
    throw std::runtime_error("sequence exceeds positional table");

  ++forwards_;
  s.raw.push_back(row.value());
  Tensor x = add(row, gather_rows(pos_, {s.len}));
  const int dh = cfg_.head_dim();
  RoutingBuffer* sink =
      (routing_enabled_ && !s.plan_mode && cfg_.backbone == Backbone::kMoe)
          ? &routing_
          : nullptr;

  for (int l = 0; l < cfg_.n_layers; ++l) {
    Block& blk = blocks_[l];
    Tensor h = layer_norm_rows(x, blk.ln1_g, blk.ln1_b);
    Tensor qr = blk.q.forward(h);
    Tensor kr = blk.k.forward(h);
    Tensor vr = blk.v.forward(h);
    std::vector<Tensor> ctx;
    ctx.reserve(cfg_.n_heads);
    for (int hd = 0; hd < cfg_.n_heads; ++hd) {
      s.kc[l][hd].push_back(slice_cols(kr, hd * dh, (hd + 1) * dh));
      s.vc[l][hd].push_back(slice_cols(vr, hd * dh, (hd + 1) * dh));
      Tensor keys = concat_rows(s.kc[l][hd]);
      Tensor q = slice_cols(qr, hd * dh, (hd + 1) * dh);
      Tensor scores =
          scale(matmul(q, transpose(keys)), 1.0 / std::sqrt(double(dh)));
      Tensor w = softmax_rows(scores);
      ctx.push_back(matmul(w, concat_rows(s.vc[l][hd])));
    }
    Tensor attn = blk.o.forward(concat_cols(ctx));
    x = add(x, attn);
    Tensor h2 = layer_norm_rows(x, blk.ln2_g, blk.ln2_b);
    const bool probed = probe && probe->layer == l;
    if (probed) probe->ffn_inputs.push_back(h2);
    std::vector<Tensor>* hid = probed ? &probe->ffn_hidden : nullptr;
    Tensor f = cfg_.backbone == Backbone::kMoe
                   ? blk.moe.forward(h2, s.task, s.step, sink, hid)
                   : blk.ffn.forward(h2, hid);
    x = add(x, f);
  }
  ++s.len;
  return layer_norm_rows(x, final_ln_g_, final_ln_b_);
}

Tensor WorldModel::append_state(Seq& s, const Tensor& z_row, ProbeSink* probe) {
  return append_row(s, token_row(s.task, z_row), probe);
}

Tensor WorldModel::append_action(Seq& s, const Action& a, ProbeSink* probe) {
  const auto& sp = cfg_.action_spaces.at(s.task);
  Tensor core;
  if (sp.discrete) {
    if (a.idx < 0 || a.idx >= sp.n)
      throw std::invalid_argument("append_action: index out of range");
    core = gather_rows(act_embed_[s.task], {a.idx});
  } else {
    if (static_cast<int>(a.vec.size()) != sp.dim)
      throw std::invalid_argument("append_action: action dim mismatch");
    core = act_linear_[s.task].forward(
        Tensor::from(std::vector<double>(a.vec), {1, sp.dim}));
  }
  return append_row(s, token_row(s.task, core), probe);
}

Tensor WorldModel::policy_head(int task, const Tensor& h) const {
  return policy_heads_.at(task).forward(h);
}

Tensor WorldModel::value_head(int task, const Tensor& h) const {
  return value_heads_.at(task).forward(h);
}

Tensor WorldModel::reward_head(int task, const Tensor& h) const {
  return reward_heads_.at(task).forward(h);
}

Tensor WorldModel::next_latent(const Tensor& h) {
  Tensor z = zhead_.forward(h);
  return cfg_.latent_norm == LatentNorm::kLayerNorm
             ? normalize_latent(z, zhead_ln_g_, zhead_ln_b_)
             : normalize_latent(z, {}, {});
}

Prediction WorldModel::predict(int task, const Tensor& h_state) const {
  Prediction out;
  const auto& sp = cfg_.action_spaces.at(task);
  Tensor logits = policy_head(task, h_state);
  if (sp.discrete) {
    const auto& v = logits.value();
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double z = 0.0;
    out.policy.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
      out.policy[i] = std::exp(v[i] - mx);
      z += out.policy[i];
    }
    for (double& p : out.policy) p /= z;
  } else {
    const auto& v = logits.value();
    out.gauss.mean.assign(v.begin(), v.begin() + sp.dim);
    out.gauss.log_std.resize(sp.dim);
    // raw head output soft-bounded to [-4, 1]
    for (int d = 0; d < sp.dim; ++d)
      out.gauss.log_std[d] = -1.5 + 2.5 * std::tanh(v[sp.dim + d]);
  }
  out.value = cfg_.support.expectation_of_logits(value_head(task, h_state).value());
  return out;
}

Seq WorldModel::plan_init(int task, const std::vector<double>& obs,
                          Prediction& out) {
  NoGradGuard ng;
  Seq s = begin_seq(task, true);
  Tensor z = encode(task, obs);
  Tensor h = append_state(s, z);
  out = predict(task, h);
  return s;
}

Seq WorldModel::plan_step(const Seq& s, const Action& a, double& reward,
                          Prediction& out) {
  NoGradGuard ng;
  Seq next = s;
  Tensor ha = append_action(next, a);
  reward = cfg_.support.expectation_of_logits(reward_head(next.task, ha).value());
  Tensor z = next_latent(ha);
  Tensor hz = append_state(next, z);
  out = predict(next.task, hz);
  return next;
}

ActionSpace WmPlanner::action_space(int task) const {
  return m_.config().action_spaces.at(task);
}

std::shared_ptr<const void> WmPlanner::initial(int task,
                                               const std::vector<double>& obs,
                                               Prediction& out) {
  return std::make_shared<const Seq>(m_.plan_init(task, obs, out));
}

std::shared_ptr<const void> WmPlanner::step(
    int task, const std::shared_ptr<const void>& state, const Action& action,
    double& reward, Prediction& out) {
  (void)task;
  const Seq* s = static_cast<const Seq*>(state.get());
  return std::make_shared<const Seq>(m_.plan_step(*s, action, reward, out));
}

void copy_params(WorldModel& dst, const WorldModel& src) {
  auto& d = dst.params().items();
  const auto& s = src.params().items();
  if (d.size() != s.size())
    throw std::runtime_error("copy_params: store size mismatch");
  for (size_t i = 0; i < d.size(); ++i) {
    if (d[i].name != s[i].name || d[i].t.shape() != s[i].t.shape())
      throw std::runtime_error("copy_params: param mismatch at " + d[i].name);
    d[i].t.value() = s[i].t.value();
  }
}

void ema_update(WorldModel& target, const WorldModel& online, double decay) {
  auto& t = target.params().items();
  const auto& o = online.params().items();
  if (t.size() != o.size())
    throw std::runtime_error("ema_update: store size mismatch");
  for (size_t i = 0; i < t.size(); ++i) {
    auto& tv = t[i].t.value();
    const auto& ov = o[i].t.value();
    for (size_t j = 0; j < tv.size(); ++j)
      tv[j] = decay * tv[j] + (1.0 - decay) * ov[j];
  }
}

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const ParamStore& ps) {
  nlohmann::ordered_json manifest;
  manifest["config"] = config_json;
  auto& plist = manifest["params"] = nlohmann::ordered_json::array();
  for (const auto& p : ps.items()) {
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["shape"] = p.t.shape();
    e["trainable"] = p.trainable;
    plist.push_back(e);
  }
  const std::string mtxt = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write("WMCK", 4);
  const uint32_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), 4);
  const uint64_t mlen = mtxt.size();
  os.write(reinterpret_cast<const char*>(&mlen), 8);
  os.write(mtxt.data(), static_cast<std::streamsize>(mtxt.size()));
  for (const auto& p : ps.items())
    os.write(reinterpret_cast<const char*>(p.t.value().data()),
             static_cast<std::streamsize>(p.t.value().size() * sizeof(double)));
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

std::string load_checkpoint(const std::string& path, ParamStore& ps,
                            std::vector<AdaptedLinear*> wrapped) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, "WMCK", 4) != 0)
    throw std::runtime_error("bad checkpoint magic");
  uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  uint64_t mlen = 0;
  is.read(reinterpret_cast<char*>(&mlen), 8);
  std::string mtxt(mlen, '\0');
  is.read(mtxt.data(), static_cast<std::streamsize>(mlen));
  auto manifest = nlohmann::json::parse(mtxt);

  // recreate adapters recorded in the manifest but absent from the store
  Rng dummy(0);
  for (const auto& e : manifest.at("params")) {
    const std::string name = e.at("name");
    const size_t lora = name.find(".lora");
    if (lora == std::string::npos || ps.find(name)) continue;
    if (name.size() < lora + 7 || name.compare(name.size() - 2, 2, ".a") != 0)
      continue;
    const size_t dot = name.find('.', lora + 1);
    const int stage = std::stoi(name.substr(lora + 5, dot - (lora + 5)));
    const std::string base = name.substr(0, lora);
    const std::vector<int> shape = e.at("shape");
    for (auto* al : wrapped)
      if (al->name == base) al->add_stage(ps, stage, shape[1], dummy);
  }

  auto& items = ps.items();
  const auto& plist = manifest.at("params");
  if (plist.size() != items.size())
    throw std::runtime_error("checkpoint param count mismatch");
  for (size_t i = 0; i < items.size(); ++i) {
    const std::string name = plist[i].at("name");
    const std::vector<int> shape = plist[i].at("shape");
    if (items[i].name != name || items[i].t.shape() != shape)
      throw std::runtime_error("checkpoint param mismatch at " + name);
    items[i].trainable = plist[i].value("trainable", true);
    is.read(reinterpret_cast<char*>(items[i].t.value().data()),
            static_cast<std::streamsize>(items[i].t.value().size() * sizeof(double)));
  }
  if (!is) throw std::runtime_error("checkpoint truncated: " + path);
  return manifest.at("config");
}

std::string read_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, "WMCK", 4) != 0)
    throw std::runtime_error("bad checkpoint magic");
  uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  uint64_t mlen = 0;
  is.read(reinterpret_cast<char*>(&mlen), 8);
  std::string mtxt(mlen, '\0');
  is.read(mtxt.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw std::runtime_error("checkpoint truncated: " + path);
  return nlohmann::json::parse(mtxt).at("config");
}

}  // namespace wmlab
