#include <bit>
#include <cstring>

#include "json.hpp"
#include "satpref/digest.hpp"
#include "satpref/lm.hpp"

namespace satpref {

namespace {

constexpr char kMagic[4] = {'P', 'A', 'D', 'P'};
constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::uint8_t kDtypeF64 = 2;

template <class T>
void put(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  std::string_view bytes(std::size_t n, const char* what) {
    if (b_.size() - off_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    auto s = b_.substr(off_, n);
    off_ += n;
    return s;
  }

  template <class T>
  T get(const char* what) {
    auto s = bytes(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return static_cast<T>(v);
  }

  bool done() const { return off_ == b_.size(); }

 private:
  std::string_view b_;
  std::size_t off_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelState& model) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  auto header = nlohmann::json::parse(model_config_to_json(model.config));
  header["role"] = std::string(to_string(model.role));
  const std::string hj = header.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(hj.size()));
  out += hj;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.parameters.size()));
  const bool f32 = model.config.float_width == FloatWidth::F32;
  for (const auto& p : model.parameters) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::uint8_t>(out, f32 ? kDtypeF32 : kDtypeF64);
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, p.value.rows);
    put<std::uint64_t>(out, p.value.cols);
    for (double v : p.value.data) {
      if (f32) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

ModelState deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = r.get<std::uint32_t>("header length");
  const std::string header(r.bytes(hlen, "header"));
  ModelState m;
  try {
    m.config = model_config_from_json(header);
    const auto j = nlohmann::json::parse(header);
    if (!j.contains("role")) throw CheckpointError("checkpoint header has no role");
    const auto role = parse_model_role(j.at("role").get<std::string>());
    if (!role) throw CheckpointError("checkpoint header has unknown role");
    m.role = *role;
    m.config.validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  const ModelState reference = init_model(m.config, m.role, 0);
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != reference.parameters.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, config implies " +
                          std::to_string(reference.parameters.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = std::string(r.bytes(r.get<std::uint32_t>("name length"), "tensor name"));
    if (t.name != reference.parameters[i].name) {
      throw CheckpointError("tensor " + std::to_string(i) + " is '" + t.name + "', expected '" +
                           reference.parameters[i].name + "'");
    }
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != kDtypeF32 && dtype != kDtypeF64) throw CheckpointError("tensor '" + t.name + "' has unknown dtype");
    if (r.get<std::uint32_t>("rank") != 2) throw CheckpointError("tensor '" + t.name + "' is not rank 2");
    const auto rows = r.get<std::uint64_t>("dims");
    const auto cols = r.get<std::uint64_t>("dims");
    const Matrix& ref = reference.parameters[i].value;
    if (rows != ref.rows || cols != ref.cols) {
      throw CheckpointError("tensor '" + t.name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                           ", expected " + std::to_string(ref.rows) + "x" + std::to_string(ref.cols));
    }
    t.value = Matrix(rows, cols);
    for (double& v : t.value.data) {
      if (dtype == kDtypeF32) v = static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>("payload")));
      else v = std::bit_cast<double>(r.get<std::uint64_t>("payload"));
    }
    m.parameters.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return m;
}

void save_checkpoint(const ModelState& model, const std::string& path) { write_file(path, serialize_checkpoint(model)); }

ModelState load_checkpoint(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("cannot read checkpoint: ") + e.what());
  }
  return deserialize_checkpoint(bytes);
}

ModelState load_checkpoint_into(const std::string& path, const ModelConfig& expected) {
  ModelState m = load_checkpoint(path);
  if (m.config != expected) throw CheckpointError("checkpoint config mismatch: " + m.config.diff(expected));
  return m;
}

}  // namespace satpref
