#pragma once

// Executable computation graph. Builders append ops in topological order;
// forward/backward walk that order with all activations kept in an external
// Workspace, so a frozen network can serve many threads, each with its own
// workspace. Normalization runs on batch statistics by default and can be
// frozen to reference statistics for pure per-sample inference.

#include <memory>
#include <string>
#include <vector>

#include "dcsod/ops.hpp"

namespace dcsod {

template <class S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  enum class Init { kaiming, one, zero } init = Init::zero;
  int fan_in = 0;
};

template <class S>
struct Workspace {
  std::vector<Tensor<S>> val;
  std::vector<Tensor<S>> grad;
  std::vector<NormCache<S>> norm_cache;
  std::vector<S> col;
};

template <class S>
class Network {
 public:
  enum class OpKind { conv, depthwise, norm, relu, concat, avgpool2, gap, linear };

  struct OpRec {
    OpKind kind;
    std::vector<int> in;
    int out = -1;
    int p0 = -1, p1 = -1;
    int kernel = 0;
    int norm_index = -1;
  };

  // -- construction ---------------------------------------------------------

  int add_input() {
    if (node_count_ != 0) throw internal_error("input must be the first node");
    return node_count_++;
  }

  int add_param(std::string name, std::vector<int> shape, typename Param<S>::Init init,
                int fan_in) {
    Param<S> p;
    p.name = std::move(name);
    p.value = Tensor<S>(shape);
    p.grad = Tensor<S>(shape);
    p.init = init;
    p.fan_in = fan_in;
    params_.push_back(std::move(p));
    return int(params_.size()) - 1;
  }

  int conv(int node, const std::string& name, int in_ch, int out_ch, int kernel) {
    int pid = add_param(name, {out_ch, in_ch * kernel * kernel}, Param<S>::Init::kaiming,
                        in_ch * kernel * kernel);
    return push({OpKind::conv, {node}, new_node(), pid, -1, kernel, -1});
  }

  int depthwise(int node, const std::string& name, int channels, int kernel) {
    int pid = add_param(name, {channels, kernel * kernel}, Param<S>::Init::kaiming,
                        kernel * kernel);
    return push({OpKind::depthwise, {node}, new_node(), pid, -1, kernel, -1});
  }

  int norm(int node, const std::string& name, int channels) {
    int g = add_param(name + ".gamma", {channels}, Param<S>::Init::one, 0);
    int b = add_param(name + ".beta", {channels}, Param<S>::Init::zero, 0);
    OpRec rec{OpKind::norm, {node}, new_node(), g, b, 0, int(frozen_mean_.size())};
    frozen_mean_.emplace_back();
    frozen_var_.emplace_back();
    return push(rec);
  }

  int relu(int node) { return push({OpKind::relu, {node}, new_node(), -1, -1, 0, -1}); }

  int concat(std::vector<int> nodes) {
    if (nodes.size() == 1) return nodes[0];
    return push({OpKind::concat, std::move(nodes), new_node(), -1, -1, 0, -1});
  }

  int avgpool2(int node) { return push({OpKind::avgpool2, {node}, new_node(), -1, -1, 0, -1}); }

  int global_avg_pool(int node) { return push({OpKind::gap, {node}, new_node(), -1, -1, 0, -1}); }

  int linear(int node, const std::string& name, int in_features, int out_features) {
    int w = add_param(name + ".w", {out_features, in_features}, Param<S>::Init::kaiming,
                      in_features);
    int b = add_param(name + ".b", {out_features}, Param<S>::Init::zero, 0);
    return push({OpKind::linear, {node}, new_node(), w, b, 0, -1});
  }

  void mark_logits(int node) { logits_node_ = node; }
  void mark_features(int node) { features_node_ = node; }

  void init_params(uint64_t seed) {
    for (size_t i = 0; i < params_.size(); ++i) {
      Param<S>& p = params_[i];
      switch (p.init) {
        case Param<S>::Init::one:
          p.value.fill(S(1));
          break;
        case Param<S>::Init::zero:
          p.value.fill(S(0));
          break;
        case Param<S>::Init::kaiming: {
          Rng rng(derive_seed(seed, {0x9a2au, uint64_t(i)}));
          const double std = std::sqrt(2.0 / double(p.fan_in));
          for (auto& x : p.value.v) x = S(rng.normal() * std);
          break;
        }
      }
      p.grad.fill(S(0));
    }
  }

  // -- execution ------------------------------------------------------------

  struct ForwardResult {
    const Tensor<S>* logits;
    const Tensor<S>* features;
  };

  ForwardResult forward(const Tensor<S>& input, Workspace<S>& ws) const {
    if (logits_node_ < 0) throw internal_error("network has no logits node");
    ws.val.resize(size_t(node_count_));
    ws.norm_cache.resize(frozen_mean_.size());
    set_tensor(ws.val[0], input.shape);
    ws.val[0].v = input.v;
    for (const OpRec& op : ops_) {
      run_forward(op, ws);
      if (check_finite_) {
        const Tensor<S>& out = ws.val[size_t(op.out)];
        check_finite(out.data(), out.v.size(), op_name(op.kind));
      }
    }
    return {&ws.val[size_t(logits_node_)],
            features_node_ >= 0 ? &ws.val[size_t(features_node_)] : nullptr};
  }

  // Accumulates parameter gradients for the forward pass recorded in ws,
  // seeding the logits node with dlogits. Call zero_grads() between steps.
  // Mutates parameter gradients: training confines a network to one worker.
  void backward(const Tensor<S>& dlogits, Workspace<S>& ws) {
    ws.grad.resize(size_t(node_count_));
    for (int i = 0; i < node_count_; ++i) {
      set_tensor(ws.grad[size_t(i)], ws.val[size_t(i)].shape);
      ws.grad[size_t(i)].fill(S(0));
    }
    if (dlogits.shape != ws.val[size_t(logits_node_)].shape)
      throw internal_error("dlogits shape mismatch");
    ws.grad[size_t(logits_node_)].v = dlogits.v;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) run_backward(*it, ws);
  }

  void zero_grads() {
    for (Param<S>& p : params_) p.grad.fill(S(0));
  }

  // Captures per-channel statistics from a reference batch and uses them for
  // every subsequent forward, making inference a pure per-sample function.
  void freeze_normalization(const Tensor<S>& reference_batch, Workspace<S>& ws) {
    unfreeze_normalization();
    forward(reference_batch, ws);
    for (const OpRec& op : ops_) {
      if (op.kind != OpKind::norm) continue;
      const NormCache<S>& c = ws.norm_cache[size_t(op.norm_index)];
      std::vector<S> var(c.inv_std.size());
      for (size_t i = 0; i < var.size(); ++i)
        var[i] = S(1.0 / (double(c.inv_std[i]) * double(c.inv_std[i])) - kNormEps);
      frozen_mean_[size_t(op.norm_index)] = c.mean;
      frozen_var_[size_t(op.norm_index)] = var;
    }
    frozen_ = true;
  }

  void unfreeze_normalization() { frozen_ = false; }
  bool frozen() const { return frozen_; }
  bool has_normalization() const { return !frozen_mean_.empty(); }

  std::vector<Param<S>>& params() { return params_; }
  const std::vector<Param<S>>& params() const { return params_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const Param<S>& p : params_) n += p.value.size();
    return n;
  }

  int logits_node() const { return logits_node_; }
  int node_count() const { return node_count_; }
  void set_check_finite(bool on) { check_finite_ = on; }

  template <class T>
  Network<T> cast() const {
    Network<T> out;
    out.node_count_ = node_count_;
    out.logits_node_ = logits_node_;
    out.features_node_ = features_node_;
    out.check_finite_ = check_finite_;
    out.frozen_ = frozen_;
    for (const OpRec& op : ops_)
      out.ops_.push_back({typename Network<T>::OpKind(int(op.kind)), op.in, op.out, op.p0, op.p1,
                          op.kernel, op.norm_index});
    for (const Param<S>& p : params_) {
      Param<T> q;
      q.name = p.name;
      q.value = p.value.template cast<T>();
      q.grad = Tensor<T>(p.grad.shape);
      q.init = typename Param<T>::Init(int(p.init));
      q.fan_in = p.fan_in;
      out.params_.push_back(std::move(q));
    }
    for (const auto& m : frozen_mean_) {
      std::vector<T> t(m.size());
      for (size_t i = 0; i < m.size(); ++i) t[i] = T(m[i]);
      out.frozen_mean_.push_back(std::move(t));
    }
    for (const auto& v : frozen_var_) {
      std::vector<T> t(v.size());
      for (size_t i = 0; i < v.size(); ++i) t[i] = T(v[i]);
      out.frozen_var_.push_back(std::move(t));
    }
    return out;
  }

 private:
  template <class T>
  friend class Network;

  int new_node() { return node_count_++; }

  int push(OpRec rec) {
    for (int i : rec.in)
      if (i < 0 || i >= node_count_) throw internal_error("op input refers to unknown node");
    ops_.push_back(rec);
    return ops_.back().out;
  }

  static void set_tensor(Tensor<S>& t, const std::vector<int>& shape) {
    t.shape = shape;
    t.v.resize(size_t(Tensor<S>::count(shape)));
  }

  static const char* op_name(OpKind k) {
    switch (k) {
      case OpKind::conv: return "conv";
      case OpKind::depthwise: return "depthwise";
      case OpKind::norm: return "channel_norm";
      case OpKind::relu: return "relu";
      case OpKind::concat: return "concat";
      case OpKind::avgpool2: return "avgpool2";
      case OpKind::gap: return "global_avg_pool";
      case OpKind::linear: return "linear";
    }
    return "?";
  }

  void run_forward(const OpRec& op, Workspace<S>& ws) const {
    const Tensor<S>& x = ws.val[size_t(op.in[0])];
    Tensor<S>& y = ws.val[size_t(op.out)];
    switch (op.kind) {
      case OpKind::conv: {
        const Tensor<S>& w = params_[size_t(op.p0)].value;
        set_tensor(y, {x.dim(0), w.dim(0), x.dim(2), x.dim(3)});
        conv2d_forward(x, w, op.kernel, y, ws.col);
        break;
      }
      case OpKind::depthwise: {
        set_tensor(y, x.shape);
        depthwise_forward(x, params_[size_t(op.p0)].value, op.kernel, y);
        break;
      }
      case OpKind::norm: {
        set_tensor(y, x.shape);
        const std::vector<S>* fm = frozen_ ? &frozen_mean_[size_t(op.norm_index)] : nullptr;
        const std::vector<S>* fv = frozen_ ? &frozen_var_[size_t(op.norm_index)] : nullptr;
        channel_norm_forward(x, params_[size_t(op.p0)].value, params_[size_t(op.p1)].value, fm, fv,
                             y, ws.norm_cache[size_t(op.norm_index)]);
        break;
      }
      case OpKind::relu:
        set_tensor(y, x.shape);
        relu_forward(x, y);
        break;
      case OpKind::concat: {
        std::vector<const Tensor<S>*> xs;
        int c = 0;
        for (int i : op.in) {
          xs.push_back(&ws.val[size_t(i)]);
          c += ws.val[size_t(i)].dim(1);
        }
        set_tensor(y, {x.dim(0), c, x.dim(2), x.dim(3)});
        concat_forward(xs, y);
        break;
      }
      case OpKind::avgpool2:
        set_tensor(y, {x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
        avgpool2_forward(x, y);
        break;
      case OpKind::gap:
        set_tensor(y, {x.dim(0), x.dim(1)});
        global_avg_pool_forward(x, y);
        break;
      case OpKind::linear: {
        const Tensor<S>& w = params_[size_t(op.p0)].value;
        set_tensor(y, {x.dim(0), w.dim(0)});
        linear_forward(x, w, params_[size_t(op.p1)].value, y);
        break;
      }
    }
  }

  void run_backward(const OpRec& op, Workspace<S>& ws) {
    const Tensor<S>& x = ws.val[size_t(op.in[0])];
    const Tensor<S>& dy = ws.grad[size_t(op.out)];
    // The input node needs no gradient.
    Tensor<S>* dx = op.in[0] == 0 ? nullptr : &ws.grad[size_t(op.in[0])];
    switch (op.kind) {
      case OpKind::conv:
        conv2d_backward(x, params_[size_t(op.p0)].value, op.kernel, dy, dx,
                        params_[size_t(op.p0)].grad, ws.col);
        break;
      case OpKind::depthwise:
        depthwise_backward(x, params_[size_t(op.p0)].value, op.kernel, dy, dx,
                           params_[size_t(op.p0)].grad);
        break;
      case OpKind::norm:
        channel_norm_backward(x, params_[size_t(op.p0)].value, dy,
                              ws.norm_cache[size_t(op.norm_index)], dx,
                              params_[size_t(op.p0)].grad, params_[size_t(op.p1)].grad);
        break;
      case OpKind::relu:
        if (dx) relu_backward(x, dy, *dx);
        break;
      case OpKind::concat: {
        std::vector<Tensor<S>*> dxs;
        for (int i : op.in) dxs.push_back(&ws.grad[size_t(i)]);
        concat_backward(dy, dxs);
        break;
      }
      case OpKind::avgpool2:
        if (dx) avgpool2_backward(x, dy, *dx);
        break;
      case OpKind::gap:
        if (dx) global_avg_pool_backward(x, dy, *dx);
        break;
      case OpKind::linear:
        linear_backward(x, params_[size_t(op.p0)].value, dy, dx,
                        params_[size_t(op.p0)].grad, params_[size_t(op.p1)].grad);
        break;
    }
  }

  std::vector<OpRec> ops_;
  std::vector<Param<S>> params_;
  std::vector<std::vector<S>> frozen_mean_, frozen_var_;
  int node_count_ = 0;
  int logits_node_ = -1;
  int features_node_ = -1;
  bool check_finite_ = true;
  bool frozen_ = false;
};

}  // namespace dcsod
