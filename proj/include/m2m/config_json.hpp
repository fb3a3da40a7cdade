#pragma once

#include <set>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "m2m/alignment.hpp"
#include "m2m/errors.hpp"
#include "m2m/metrics.hpp"
#include "m2m/model.hpp"
#include "m2m/synthdata.hpp"
#include "m2m/training.hpp"

namespace m2m {

using Json = nlohmann::ordered_json;

// Everything a run needs. Missing keys keep their defaults; unknown keys are
// rejected so a typo cannot silently fall back to a default.
struct RunConfig {
  SynthSpec data;
  ModelConfig model;
  TrainConfig train;
  M2MConfig m2m;

  void validate() const {
    data.validate();
    model.validate();
    train.validate();
    m2m.validate();
    if (model.volume != data.grid) throw ConfigError("model.volume must equal data.grid");
    if (model.tabular_features != data.tabular_dim)
      throw ConfigError("model.tabular_features must equal data.tabular_dim");
  }
};

namespace json_detail {

class Reader {
 public:
  Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!it->is_number_unsigned()) throw ConfigError(where_ + "." + key + " must be a non-negative integer");
    }
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename Fn>
  void get_with(const char* key, Fn&& fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) fn(*it, where_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + where_ + "." + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline std::string as_string(const Json& j, const std::string& where) {
  if (!j.is_string()) throw ConfigError(where + " must be a string");
  return j.get<std::string>();
}

inline const char* combine_name(StCombine c) { return c == StCombine::kGate ? "gate" : "outer"; }

inline StCombine parse_combine(const std::string& s) {
  if (s == "gate") return StCombine::kGate;
  if (s == "outer") return StCombine::kOuter;
  throw ConfigError("unknown st_combine '" + s + "'");
}

inline const char* denominator_name(DenominatorMode d) {
  return d == DenominatorMode::kStandard ? "standard" : "literal";
}

inline DenominatorMode parse_denominator(const std::string& s) {
  if (s == "standard") return DenominatorMode::kStandard;
  if (s == "literal") return DenominatorMode::kLiteral;
  throw ConfigError("unknown denominator mode '" + s + "'");
}

}  // namespace json_detail

inline Json to_json(const EncoderConfig& c) {
  return Json{{"patch", c.patch},       {"stage_channels", c.stage_channels}, {"heads", c.heads},
              {"merge", c.merge},       {"full_attention", c.full_attention}, {"mlp_ratio", c.mlp_ratio}};
}

inline Json to_json(const ModelConfig& c) {
  return Json{{"encoder", to_json(c.encoder)},
              {"volume", c.volume},
              {"tabular_features", c.tabular_features},
              {"tabular_tokens", c.tabular_tokens},
              {"joint_queries", c.joint_queries},
              {"temporal_queries", c.temporal_queries},
              {"st_combine", json_detail::combine_name(c.st_combine)},
              {"share_encoder_weights", c.share_encoder_weights},
              {"init_std", c.init_std},
              {"query_init_std", c.query_init_std}};
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"lr_max", c.lr_max},
              {"warmup_epochs", c.warmup_epochs},
              {"total_epochs", c.total_epochs},
              {"folds", c.folds},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"modalities", {{"fmri", c.modalities.fmri}, {"smri", c.modalities.smri}, {"tabular", c.modalities.tabular}}},
              {"toggles",
               {{"temporal_self_fusion", c.toggles.temporal_self_fusion},
                {"spatial_fusion", c.toggles.spatial_fusion},
                {"modality_refinement", c.toggles.modality_refinement},
                {"alignment", c.toggles.alignment}}}};
}

inline Json to_json(const M2MConfig& c) {
  return Json{{"tau", c.tau},
              {"measure", measure_name(c.measure)},
              {"weighting", c.weighting},
              {"denominator", json_detail::denominator_name(c.denominator)},
              {"lambda", c.lambda},
              {"symmetric", c.symmetric},
              {"epsilon_floor", c.epsilon_floor}};
}

inline Json to_json(const SynthSpec& s) {
  Json j{{"n_subjects", s.n_subjects}};
  j["n_positive"] = s.n_positive ? Json(*s.n_positive) : Json(nullptr);
  j["grid"] = s.grid;
  j["k_f"] = s.k_f;
  j["k_s"] = s.k_s;
  j["correspondence"] = s.resolved_correspondence();
  j["class_effect"] = s.class_effect;
  j["class_components"] = s.class_components;
  j["noise_sigma"] = s.noise_sigma;
  j["tabular_dim"] = s.tabular_dim;
  j["tabular_signal"] = s.tabular_signal;
  j["blob_sigma"] = s.blob_sigma;
  j["center_jitter"] = s.center_jitter;
  j["temporal_amplitude"] = s.temporal_amplitude;
  j["zscore"] = s.zscore;
  j["seed"] = s.seed;
  return j;
}

inline Json to_json(const RunConfig& c) {
  return Json{{"data", to_json(c.data)}, {"model", to_json(c.model)}, {"train", to_json(c.train)}, {"m2m", to_json(c.m2m)}};
}

inline Json to_json(const FoldMetrics& m) {
  return Json{{"pr_auc", m.pr_auc}, {"roc_auc", m.roc_auc}, {"accuracy", m.accuracy}};
}

inline Json to_json(const MetricsReport& r) {
  Json folds = Json::array();
  for (const auto& f : r.folds) folds.push_back(to_json(f));
  return Json{{"folds", folds}, {"mean", to_json(r.mean)}, {"std", to_json(r.std)}};
}

inline void from_json_into(const Json& j, EncoderConfig& c, const std::string& where = "encoder") {
  json_detail::Reader r(j, where);
  r.get("patch", c.patch);
  r.get("stage_channels", c.stage_channels);
  r.get("heads", c.heads);
  r.get("merge", c.merge);
  r.get("full_attention", c.full_attention);
  r.get("mlp_ratio", c.mlp_ratio);
  r.finish();
}

inline void from_json_into(const Json& j, ModelConfig& c, const std::string& where = "model") {
  json_detail::Reader r(j, where);
  r.get_with("encoder", [&](const Json& v, const std::string& w) { from_json_into(v, c.encoder, w); });
  r.get("volume", c.volume);
  r.get("tabular_features", c.tabular_features);
  r.get("tabular_tokens", c.tabular_tokens);
  r.get("joint_queries", c.joint_queries);
  r.get("temporal_queries", c.temporal_queries);
  r.get_with("st_combine", [&](const Json& v, const std::string& w) {
    c.st_combine = json_detail::parse_combine(json_detail::as_string(v, w));
  });
  r.get("share_encoder_weights", c.share_encoder_weights);
  r.get("init_std", c.init_std);
  r.get("query_init_std", c.query_init_std);
  r.finish();
}

inline void from_json_into(const Json& j, TrainConfig& c, const std::string& where = "train") {
  json_detail::Reader r(j, where);
  r.get("lr_max", c.lr_max);
  r.get("warmup_epochs", c.warmup_epochs);
  r.get("total_epochs", c.total_epochs);
  r.get("folds", c.folds);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  r.get("weight_decay", c.weight_decay);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get_with("modalities", [&](const Json& v, const std::string& w) {
    json_detail::Reader m(v, w);
    m.get("fmri", c.modalities.fmri);
    m.get("smri", c.modalities.smri);
    m.get("tabular", c.modalities.tabular);
    m.finish();
  });
  r.get_with("toggles", [&](const Json& v, const std::string& w) {
    json_detail::Reader t(v, w);
    t.get("temporal_self_fusion", c.toggles.temporal_self_fusion);
    t.get("spatial_fusion", c.toggles.spatial_fusion);
    t.get("modality_refinement", c.toggles.modality_refinement);
    t.get("alignment", c.toggles.alignment);
    t.finish();
  });
  r.finish();
}

inline void from_json_into(const Json& j, M2MConfig& c, const std::string& where = "m2m") {
  json_detail::Reader r(j, where);
  r.get("tau", c.tau);
  r.get_with("measure", [&](const Json& v, const std::string& w) {
    c.measure = parse_measure(json_detail::as_string(v, w));
  });
  r.get("weighting", c.weighting);
  r.get_with("denominator", [&](const Json& v, const std::string& w) {
    c.denominator = json_detail::parse_denominator(json_detail::as_string(v, w));
  });
  r.get("lambda", c.lambda);
  r.get("symmetric", c.symmetric);
  r.get("epsilon_floor", c.epsilon_floor);
  r.finish();
}

inline void from_json_into(const Json& j, SynthSpec& s, const std::string& where = "data") {
  json_detail::Reader r(j, where);
  r.get("n_subjects", s.n_subjects);
  r.get_with("n_positive", [&](const Json& v, const std::string& w) {
    if (v.is_null()) {
      s.n_positive.reset();
    } else if (v.is_number_unsigned()) {
      s.n_positive = v.get<std::size_t>();
    } else {
      throw ConfigError(w + " must be a non-negative integer or null");
    }
  });
  r.get("grid", s.grid);
  r.get("k_f", s.k_f);
  r.get("k_s", s.k_s);
  r.get("correspondence", s.correspondence);
  r.get("class_effect", s.class_effect);
  r.get("class_components", s.class_components);
  r.get("noise_sigma", s.noise_sigma);
  r.get("tabular_dim", s.tabular_dim);
  r.get("tabular_signal", s.tabular_signal);
  r.get("blob_sigma", s.blob_sigma);
  r.get("center_jitter", s.center_jitter);
  r.get("temporal_amplitude", s.temporal_amplitude);
  r.get("zscore", s.zscore);
  r.get("seed", s.seed);
  r.finish();
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  json_detail::Reader r(j, "config");
  r.get_with("data", [&](const Json& v, const std::string& w) { from_json_into(v, c.data, w); });
  r.get_with("model", [&](const Json& v, const std::string& w) { from_json_into(v, c.model, w); });
  r.get_with("train", [&](const Json& v, const std::string& w) { from_json_into(v, c.train, w); });
  r.get_with("m2m", [&](const Json& v, const std::string& w) { from_json_into(v, c.m2m, w); });
  r.finish();
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace m2m
