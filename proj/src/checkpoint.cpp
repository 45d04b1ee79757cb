#include "mdmt/checkpoint.hpp"

#include <cstring>

#include "mdmt/io_util.hpp"

namespace mdmt {

namespace {
constexpr char kMagic[8] = "MDMTCK1";
constexpr uint32_t kVersion = 1;
}  // namespace

const Tensor<float>* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::string Checkpoint::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw IoError("checkpoint is missing metadata key '" + key + "'");
  return it->second;
}

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  ByteWriter body;
  body.put_u32(ck.version);
  body.put_u32(static_cast<uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    body.put_string(k);
    body.put_string(v);
  }
  body.put_u32(static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    body.put_string(name);
    body.put_u32(static_cast<uint32_t>(t.rank));
    if (t.rank == 1) {
      body.put_u32(static_cast<uint32_t>(t.cols()));
    } else {
      body.put_u32(static_cast<uint32_t>(t.rows()));
      body.put_u32(static_cast<uint32_t>(t.cols()));
    }
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) body.put_f32(t.values(r, c));
    }
  }
  const uint32_t crc = crc32(body.buffer().data(), body.buffer().size());

  ByteWriter out;
  out.put_bytes(kMagic, 7);
  out.put_bytes(body.buffer().data(), body.buffer().size());
  out.put_u32(crc);
  return out.buffer();
}

Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 7 + 4 + 4) throw IoError("checkpoint file is too short");
  if (std::memcmp(bytes.data(), kMagic, 7) != 0) {
    throw IoError("not a checkpoint file (bad magic)");
  }
  const size_t body_len = bytes.size() - 7 - 4;
  const uint32_t stored_crc = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24);
  const uint32_t actual_crc = crc32(bytes.data() + 7, body_len);
  if (stored_crc != actual_crc) {
    throw IoError("checkpoint checksum failure (corrupt archive)");
  }

  ByteReader r(std::vector<uint8_t>(bytes.begin() + 7, bytes.begin() + 7 + body_len));
  Checkpoint ck;
  ck.version = r.get_u32();
  if (ck.version != kVersion) {
    throw IoError("unsupported checkpoint format version " + std::to_string(ck.version) +
                  " (expected " + std::to_string(kVersion) + ")");
  }
  const uint32_t n_meta = r.get_u32();
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.get_string();
    std::string v = r.get_string();
    ck.meta.emplace(std::move(k), std::move(v));
  }
  const uint32_t n_tensors = r.get_u32();
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.get_string();
    const uint32_t rank = r.get_u32();
    if (rank != 1 && rank != 2) throw IoError("checkpoint tensor '" + name + "' has bad rank");
    Tensor<float> t;
    if (rank == 1) {
      t = Tensor<float>::vector(static_cast<Eigen::Index>(r.get_u32()));
    } else {
      const uint32_t rows = r.get_u32();
      const uint32_t cols = r.get_u32();
      t = Tensor<float>::matrix(rows, cols);
    }
    for (Eigen::Index row = 0; row < t.rows(); ++row) {
      for (Eigen::Index col = 0; col < t.cols(); ++col) t.values(row, col) = r.get_f32();
    }
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw IoError("trailing bytes in checkpoint body");
  return ck;
}

void save_checkpoint_file(const Checkpoint& ck, const std::string& path) {
  const auto bytes = serialize_checkpoint(ck);
  write_file_bytes(path, bytes.data(), bytes.size());
}

Checkpoint load_checkpoint_file(const std::string& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

Checkpoint make_checkpoint(Model<float>& model, const Optimizer<float>& model_opt,
                           const Optimizer<float>& fusion_opt) {
  Checkpoint ck;
  const Hyper& hp = std::visit([](auto& m) -> const Hyper& { return m.hp; }, model);
  const FeatureSpace& space =
      std::visit([](auto& m) -> const FeatureSpace& { return m.space; }, model);
  const VariantKind kind = std::holds_alternative<MlpEnsemble<float>>(model)
                               ? VariantKind::mlp_single
                               : std::get<M3oECore<float>>(model).kind;

  ck.meta["variant"] = variant_name(kind);
  ck.meta["hp.domain_count"] = std::to_string(hp.domain_count);
  ck.meta["hp.task_count"] = std::to_string(hp.task_count);
  ck.meta["hp.shared_experts"] = std::to_string(hp.shared_experts);
  ck.meta["hp.embedding_dim"] = std::to_string(hp.embedding_dim);
  ck.meta["hp.hidden_dim"] = std::to_string(hp.hidden_dim);
  ck.meta["hp.expert_dim"] = std::to_string(hp.expert_dim);
  ck.meta["hp.tower_hidden"] = std::to_string(hp.tower_hidden);
  ck.meta["space.fields"] = std::to_string(space.field_count());
  for (size_t f = 0; f < space.fields.size(); ++f) {
    ck.meta["space.field." + std::to_string(f) + ".name"] = space.fields[f].name;
    ck.meta["space.field." + std::to_string(f) + ".vocab"] =
        std::to_string(space.fields[f].vocab);
  }
  ck.meta["opt.kind"] = optimizer_name(model_opt.kind());
  ck.meta["opt.model.steps"] = std::to_string(model_opt.step_count());
  ck.meta["opt.fusion.steps"] = std::to_string(fusion_opt.step_count());

  visit_params(model, [&](const std::string& name, Tensor<float>& t) {
    ck.tensors.emplace_back(name, t);
  });
  auto dump_moments = [&](const char* tag, const Optimizer<float>& opt) {
    for (const auto& [name, st] : opt.moments()) {
      Tensor<float> m, v;
      m.values = st.m;
      v.values = st.v;
      m.rank = v.rank = 2;
      ck.tensors.emplace_back(std::string("opt.") + tag + ".m." + name, std::move(m));
      ck.tensors.emplace_back(std::string("opt.") + tag + ".v." + name, std::move(v));
    }
  };
  dump_moments("model", model_opt);
  dump_moments("fusion", fusion_opt);
  return ck;
}

Model<float> model_from_checkpoint(const Checkpoint& ck) {
  Hyper hp;
  hp.domain_count = static_cast<uint32_t>(std::stoul(ck.meta_at("hp.domain_count")));
  hp.task_count = static_cast<uint32_t>(std::stoul(ck.meta_at("hp.task_count")));
  hp.shared_experts = static_cast<uint32_t>(std::stoul(ck.meta_at("hp.shared_experts")));
  hp.embedding_dim = static_cast<uint32_t>(std::stoul(ck.meta_at("hp.embedding_dim")));
  hp.hidden_dim = static_cast<uint32_t>(std::stoul(ck.meta_at("hp.hidden_dim")));
  hp.expert_dim = static_cast<uint32_t>(std::stoul(ck.meta_at("hp.expert_dim")));
  hp.tower_hidden = static_cast<uint32_t>(std::stoul(ck.meta_at("hp.tower_hidden")));
  FeatureSpace space;
  space.domain_count = hp.domain_count;
  space.task_count = hp.task_count;
  const size_t n_fields = std::stoul(ck.meta_at("space.fields"));
  for (size_t f = 0; f < n_fields; ++f) {
    FieldDesc fd;
    fd.name = ck.meta_at("space.field." + std::to_string(f) + ".name");
    fd.vocab = static_cast<uint32_t>(
        std::stoul(ck.meta_at("space.field." + std::to_string(f) + ".vocab")));
    space.fields.push_back(std::move(fd));
  }
  Model<float> model = build_variant<float>(variant_from_name(ck.meta_at("variant")), hp, space, 0);

  size_t filled = 0;
  visit_params(model, [&](const std::string& name, Tensor<float>& t) {
    const Tensor<float>* stored = ck.find_tensor(name);
    if (stored == nullptr) throw IoError("checkpoint is missing tensor '" + name + "'");
    if (stored->rows() != t.rows() || stored->cols() != t.cols()) {
      throw IoError("checkpoint tensor '" + name + "' has unexpected shape");
    }
    t.values = stored->values;
    ++filled;
  });
  size_t param_tensors = 0;
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("opt.", 0) != 0) ++param_tensors;
  }
  if (filled != param_tensors) {
    throw IoError("checkpoint holds " + std::to_string(param_tensors) +
                  " parameter tensors but the model expects " + std::to_string(filled));
  }
  return model;
}

void optimizers_from_checkpoint(const Checkpoint& ck, Model<float>& model,
                                Optimizer<float>& model_opt, Optimizer<float>& fusion_opt) {
  model_opt.set_step_count(std::stoull(ck.meta_at("opt.model.steps")));
  fusion_opt.set_step_count(std::stoull(ck.meta_at("opt.fusion.steps")));
  auto load_moments = [&](const std::string& tag, Optimizer<float>& opt) {
    opt.moments().clear();
    visit_params(model, [&](const std::string& name, Tensor<float>& t) {
      const Tensor<float>* m = ck.find_tensor("opt." + tag + ".m." + name);
      const Tensor<float>* v = ck.find_tensor("opt." + tag + ".v." + name);
      if (m == nullptr || v == nullptr) return;  // no moments yet for this param
      if (m->rows() != t.rows() || m->cols() != t.cols()) {
        throw IoError("optimizer moment shape mismatch for '" + name + "'");
      }
      opt.moments()[name] = {m->values, v->values};
    });
  };
  load_moments("model", model_opt);
  load_moments("fusion", fusion_opt);
}

uint64_t hash_tensors(const std::vector<ParamRef<float>>& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, size_t len) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    for (Eigen::Index r = 0; r < p.tensor->rows(); ++r) {
      mix(p.tensor->values.row(r).data(), sizeof(float) * static_cast<size_t>(p.tensor->cols()));
    }
  }
  return h;
}

}  // namespace mdmt
