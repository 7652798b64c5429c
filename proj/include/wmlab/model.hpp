#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wmlab/lora.hpp"
#include "wmlab/mcts.hpp"
#include "wmlab/moe.hpp"
#include "wmlab/nn.hpp"
#include "wmlab/types.hpp"

namespace wmlab {

enum class Backbone { kDense, kMoe };
enum class LatentNorm { kLayerNorm, kSimNorm };

struct ModelConfig {
  int latent_dim = 32;
  int task_embed_dim = 0;
  int n_layers = 2;
  int n_heads = 2;
  int ffn_hidden = 128;    // dense backbone FFN
  int expert_hidden = 64;  // per-expert hidden width (moe backbone)
  int n_experts = 4;       // non-shared experts
  Backbone backbone = Backbone::kDense;
  LatentNorm latent_norm = LatentNorm::kLayerNorm;
  int simnorm_group = 8;
  double simnorm_tau = 1.0;
  int encoder_hidden = 64;
  int context_len = 5;    // H: training unroll length
  int infer_context = 2;  // planning window in (state, action) pairs
  Support support;
  std::vector<int> obs_dims;              // per task
  std::vector<ActionSpace> action_spaces; // per task

  int n_tasks() const { return static_cast<int>(obs_dims.size()); }
  // blocks always run at latent_dim; task embeddings enter through an input
  // projection back to this width
  int width() const { return latent_dim; }
  int head_dim() const { return width() / n_heads; }
  int plan_tokens() const { return 2 * infer_context + 2; }
  int max_positions() const;
  void validate() const;
};

// Activation capture for diagnostics: encoder outputs, the rows entering the
// FFN/MoE of one designated layer, and that layer's post-relu hidden rows.
struct ProbeSink {
  int layer = -1;
  std::vector<Tensor> encoder_outputs;
  std::vector<Tensor> ffn_inputs;
  std::vector<Tensor> ffn_hidden;
};

struct Block {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  AdaptedLinear q, k, v, o;
  Mlp ffn;     // dense backbone
  MoeFfn moe;  // moe backbone
};

// Rolling token context over alternating state/action tokens. Key/value rows
// are cached per layer and head as graph tensors, so appending a token only
// computes that token's column. The same path serves the training unroll
// (grads on) and planning (grads off); in plan mode the window slides by
// rebuilding from the last `infer_context` pairs of raw token rows.
struct Seq {
  int task = 0;
  int len = 0;
  bool plan_mode = false;
  int64_t step = 0;                                       // routing record id
  std::vector<std::vector<std::vector<Tensor>>> kc, vc;   // [layer][head][token]
  std::vector<std::vector<double>> raw;                   // token rows, pre-position
};

class WorldModel {
 public:
  WorldModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  RoutingBuffer& routing() { return routing_; }
  std::vector<AdaptedLinear*> adapted_linears();
  // prefixes that constitute the frozen base for staged expansion
  static std::vector<std::string> freeze_prefixes();

  // obs -> normalized latent row [1, latent_dim]
  Tensor encode(int task, const std::vector<double>& obs,
                ProbeSink* probe = nullptr);

  Seq begin_seq(int task, bool plan_mode) const;
  // appends a state token (a latent row); returns the backbone row there
  Tensor append_state(Seq& s, const Tensor& z_row, ProbeSink* probe = nullptr);
  // appends an action token; returns the backbone row there
  Tensor append_action(Seq& s, const Action& a, ProbeSink* probe = nullptr);

  Tensor policy_head(int task, const Tensor& h) const;
  Tensor value_head(int task, const Tensor& h) const;
  Tensor reward_head(int task, const Tensor& h) const;
  Tensor next_latent(const Tensor& h);  // normalized [1, latent_dim]

  // plain-value prediction at a state-token backbone row (no grads)
  Prediction predict(int task, const Tensor& h_state) const;

  // no-grad planning steps
  Seq plan_init(int task, const std::vector<double>& obs, Prediction& out);
  Seq plan_step(const Seq& s, const Action& a, double& reward, Prediction& out);

  // records routing decisions into routing() when enabled (training unrolls)
  void set_routing_enabled(bool on) { routing_enabled_ = on; }
  void set_routing_step(int64_t step) { routing_step_ = step; }

  int64_t forward_count() const { return forwards_; }

 private:
  Tensor token_row(int task, const Tensor& core_row);
  Tensor append_row(Seq& s, const Tensor& row, ProbeSink* probe);
  Tensor normalize_latent(const Tensor& z, const Tensor& g, const Tensor& b) const;

  ModelConfig cfg_;
  ParamStore ps_;
  RoutingBuffer routing_;
  bool routing_enabled_ = false;
  int64_t routing_step_ = 0;
  int64_t forwards_ = 0;

  Tensor task_embed_;  // [n_tasks, task_embed_dim]
  Linear in_proj_;     // [latent + task_embed_dim, latent]; only when te > 0
  Tensor pos_;         // [max_positions, width]
  std::vector<Mlp> encoders_;
  std::vector<Tensor> enc_ln_g_, enc_ln_b_;
  std::vector<Tensor> act_embed_;   // discrete tasks: [n_actions, latent]
  std::vector<Linear> act_linear_;  // continuous tasks
  std::vector<Block> blocks_;
  Tensor final_ln_g_, final_ln_b_;
  Linear zhead_;
  Tensor zhead_ln_g_, zhead_ln_b_;
  std::vector<Linear> policy_heads_, value_heads_, reward_heads_;
};

// planner adapter over a world model
class WmPlanner : public PlanningModel {
 public:
  explicit WmPlanner(WorldModel& m) : m_(m) {}
  ActionSpace action_space(int task) const override;
  std::shared_ptr<const void> initial(int task, const std::vector<double>& obs,
                                      Prediction& out) override;
  std::shared_ptr<const void> step(int task,
                                   const std::shared_ptr<const void>& state,
                                   const Action& action, double& reward,
                                   Prediction& out) override;

 private:
  WorldModel& m_;
};

// target-network helpers; both models must share creation order
void copy_params(WorldModel& dst, const WorldModel& src);
void ema_update(WorldModel& target, const WorldModel& online, double decay);

// checkpoint: JSON manifest (config text, param names/shapes) + raw float64
void save_checkpoint(const std::string& path, const std::string& config_json,
                     const ParamStore& ps);
// loads values into an existing store; missing "loraN" params are created
// via `wrapped` first. Returns the stored config text.
std::string load_checkpoint(const std::string& path, ParamStore& ps,
                            std::vector<AdaptedLinear*> wrapped = {});
// the stored config text alone, without touching any store
std::string read_checkpoint_config(const std::string& path);

}  // namespace wmlab
