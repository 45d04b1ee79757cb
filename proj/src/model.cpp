#include "mdmt/model.hpp"

namespace mdmt {

const char* variant_name(VariantKind k) {
  switch (k) {
    case VariantKind::full: return "full";
    case VariantKind::mlp_single: return "mlp_single";
    case VariantKind::shared_only: return "shared_only";
    case VariantKind::no_domain_module: return "no_domain";
    case VariantKind::no_task_module: return "no_task";
    case VariantKind::no_automl: return "no_automl";
    case VariantKind::concat_modules: return "concat";
    case VariantKind::fully_gated: return "fully_gated";
  }
  return "?";
}

VariantKind variant_from_name(const std::string& name) {
  if (name == "full") return VariantKind::full;
  if (name == "mlp_single") return VariantKind::mlp_single;
  if (name == "shared_only") return VariantKind::shared_only;
  if (name == "no_domain") return VariantKind::no_domain_module;
  if (name == "no_task") return VariantKind::no_task_module;
  if (name == "no_automl") return VariantKind::no_automl;
  if (name == "concat") return VariantKind::concat_modules;
  if (name == "fully_gated") return VariantKind::fully_gated;
  throw ValidationError("unknown model variant '" + name +
                        "' (expected full, mlp_single, shared_only, no_domain, no_task, "
                        "no_automl, concat or fully_gated)");
}

std::string census_group_for(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("emb.")) return "embedding";
  if (starts("repr.")) return "domain_repr";
  if (starts("experts.shared.")) return "shared_experts";
  if (starts("experts.domain.")) return "domain_experts";
  if (starts("experts.task.")) return "task_experts";
  if (starts("gates.")) return "gates";
  if (starts("towers.")) return "towers";
  if (starts("fusion.e_alpha_d")) return "fusion_alpha_d";
  if (starts("fusion.e_alpha_t")) return "fusion_alpha_t";
  if (starts("fusion.e_beta_d")) return "fusion_beta_d";
  if (starts("fusion.e_beta_t")) return "fusion_beta_t";
  if (starts("mix.")) return "concat_mix";
  if (starts("module_gates.")) return "module_gates";
  if (starts("pair.")) {
    const size_t dot = name.find('.', 5);
    const std::string rest = dot == std::string::npos ? "" : name.substr(dot + 1);
    if (rest.rfind("emb.", 0) == 0) return "embedding";
    if (rest.rfind("hid_", 0) == 0) return "hidden";
    return "towers";
  }
  return "other";
}

ExportStage export_stage_from_name(const std::string& name) {
  if (name == "domain_module") return ExportStage::domain_module;
  if (name == "task_module") return ExportStage::task_module;
  if (name == "fused") return ExportStage::fused;
  throw ValidationError("unknown export stage '" + name +
                        "' (expected domain_module, task_module or fused)");
}

const char* export_stage_name(ExportStage s) {
  switch (s) {
    case ExportStage::domain_module: return "domain_module";
    case ExportStage::task_module: return "task_module";
    case ExportStage::fused: return "fused";
  }
  return "?";
}

}  // namespace mdmt
