#include "mhkd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mhkd/errors.hpp"

namespace mhkd {

namespace {

constexpr char kMagic[8] = {'M', 'H', 'K', 'D', 'C', 'K', 'P', 'T'};

constexpr std::uint32_t tag(const char (&s)[5]) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(s[0])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[3])) << 24;
}

constexpr std::uint32_t kArch = tag("ARCH"), kParm = tag("PARM"), kBufs = tag("BUFS"),
                        kHead = tag("HEAD"), kTrst = tag("TRST");

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void i64(long long v) { u64(static_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void bytes(const std::vector<std::uint8_t>& b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> in, std::string what) : in_(in), what_(std::move(what)) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  int i32() { return static_cast<int>(u32()); }
  long long i64() { return static_cast<long long>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    auto n = u32();
    auto b = take(n);
    return std::string(b.begin(), b.end());
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > in_.size() - pos_)
      throw CheckpointError(what_ + ": truncated at byte " + std::to_string(pos_));
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::uint64_t le(int n) {
    auto b = take(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::string what_;
  std::size_t pos_ = 0;
};

void section(Writer& w, std::uint32_t t, Writer& body) {
  w.u32(t);
  w.u64(body.data().size());
  w.bytes(body.data());
}

void write_arch(Writer& w, const NetworkSpec& spec, const TaskSpec& task) {
  w.str(spec.name);
  w.i32(task.num_classes);
  w.i32(task.channels);
  w.i32(task.height);
  w.i32(task.width);
  w.u32(static_cast<std::uint32_t>(spec.units.size()));
  for (const auto& u : spec.units) {
    w.i32(u.pool_window);
    w.i32(u.pool_stride);
    w.u32(static_cast<std::uint32_t>(u.layers.size()));
    for (const auto& l : u.layers) {
      for (int v : {l.out_channels, l.in_channels, l.kernel_h, l.kernel_w, l.stride, l.padding})
        w.i32(v);
      w.u8(l.has_bn ? 1 : 0);
      w.u8(l.activation == Activation::kRelu ? 0 : 1);
    }
  }
}

std::pair<NetworkSpec, TaskSpec> read_arch(Reader& r) {
  NetworkSpec spec;
  TaskSpec task;
  spec.name = r.str();
  task.num_classes = r.i32();
  task.channels = r.i32();
  task.height = r.i32();
  task.width = r.i32();
  auto units = r.u32();
  if (units > 1024) throw CheckpointError("checkpoint: implausible unit count");
  for (std::uint32_t i = 0; i < units; ++i) {
    UnitSpec u;
    u.pool_window = r.i32();
    u.pool_stride = r.i32();
    auto layers = r.u32();
    if (layers > 1024) throw CheckpointError("checkpoint: implausible layer count");
    for (std::uint32_t j = 0; j < layers; ++j) {
      ConvLayerSpec l;
      l.out_channels = r.i32();
      l.in_channels = r.i32();
      l.kernel_h = r.i32();
      l.kernel_w = r.i32();
      l.stride = r.i32();
      l.padding = r.i32();
      l.has_bn = r.u8() != 0;
      l.activation = r.u8() == 0 ? Activation::kRelu : Activation::kNone;
      u.layers.push_back(l);
    }
    spec.units.push_back(std::move(u));
  }
  return {spec, task};
}

void write_tensor(Writer& w, const std::string& name, const Tensor<float>& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) w.i32(d);
  for (float v : t.data()) w.f32(v);
}

// Reads one tensor record into `dst`, whose name and shape must match.
void read_tensor_into(Reader& r, const std::string& name, Tensor<float>& dst) {
  auto got = r.str();
  if (got != name)
    throw CheckpointError("checkpoint: expected tensor '" + name + "', found '" + got + "'");
  auto nd = r.u32();
  Shape shape;
  for (std::uint32_t i = 0; i < nd && i < 16; ++i) shape.push_back(r.i32());
  if (shape != dst.shape())
    throw CheckpointError("checkpoint: tensor '" + name + "' has an incompatible shape");
  for (float& v : dst.data()) v = r.f32();
}

template <typename Params>
void write_params(Writer& w, const Params& params) {
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    write_tensor(w, p.name, p.tensor);
    w.u8(p.decay ? 1 : 0);
  }
}

template <typename Params>
void read_params(Reader& r, Params params) {
  if (r.u32() != params.size()) throw CheckpointError("checkpoint: parameter count mismatch");
  for (auto& p : params) {
    read_tensor_into(r, p.name, p.tensor);
    if ((r.u8() != 0) != p.decay)
      throw CheckpointError("checkpoint: decay flag mismatch on '" + p.name + "'");
  }
}

template <typename Buffers>
void write_buffers(Writer& w, const Buffers& bufs) {
  w.u32(static_cast<std::uint32_t>(bufs.size()));
  for (const auto& b : bufs) write_tensor(w, b.name, b.tensor);
}

template <typename Buffers>
void read_buffers(Reader& r, Buffers bufs) {
  if (r.u32() != bufs.size()) throw CheckpointError("checkpoint: buffer count mismatch");
  for (auto& b : bufs) read_tensor_into(r, b.name, b.tensor);
}

std::string head_prefix(FeatureSource side, int unit) {
  return std::string(side == FeatureSource::kTeacher ? "head_t" : "head_s") + std::to_string(unit);
}

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u8(kCheckpointVersion);

  Writer arch;
  write_arch(arch, ckpt.network.spec(), ckpt.network.task());
  section(w, kArch, arch);
  Writer parm;
  write_params(parm, ckpt.network.parameters());
  section(w, kParm, parm);
  Writer bufs;
  write_buffers(bufs, ckpt.network.buffers());
  section(w, kBufs, bufs);

  if (ckpt.heads) {
    const auto& h = *ckpt.heads;
    if (h.teacher.size() != h.units.size() || h.student.size() != h.units.size())
      throw ContractError("checkpoint: head bundle is not aligned with its units");
    Writer body;
    for (int v : {h.spec.num_conv, h.spec.num_fc, h.spec.conv_channels, h.spec.kernel,
                  h.spec.fc_hidden, h.spec.num_classes})
      body.i32(v);
    body.u32(static_cast<std::uint32_t>(h.units.size()));
    for (std::size_t j = 0; j < h.units.size(); ++j) {
      body.i32(h.units[j]);
      body.i32(h.teacher[j].in_channels());
      body.i32(h.student[j].in_channels());
      auto tp = head_prefix(FeatureSource::kTeacher, h.units[j]);
      auto sp = head_prefix(FeatureSource::kStudent, h.units[j]);
      write_params(body, h.teacher[j].parameters(tp));
      write_buffers(body, h.teacher[j].buffers(tp));
      write_params(body, h.student[j].parameters(sp));
      write_buffers(body, h.student[j].buffers(sp));
    }
    section(w, kHead, body);
  }

  if (ckpt.state) {
    const auto& s = *ckpt.state;
    Writer body;
    body.i32(s.epoch);
    body.i64(s.step);
    body.u64(s.run_seed);
    for (auto v : {s.seeds.init, s.seeds.shuffle, s.seeds.augment, s.seeds.heads}) body.u64(v);
    body.u32(static_cast<std::uint32_t>(s.velocity.size()));
    for (const auto& v : s.velocity) {
      body.u64(v.size());
      for (float x : v) body.f32(x);
    }
    section(w, kTrst, body);
  }
  return std::move(w.data());
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "checkpoint");
  auto magic = r.take(sizeof kMagic);
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError("checkpoint: bad magic, not a checkpoint file");
  auto version = r.u8();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) +
                          " (this build reads version " + std::to_string(kCheckpointVersion) + ")");

  // Sections are read in a fixed order; optional ones are recognized by tag.
  std::vector<std::pair<std::uint32_t, std::span<const std::uint8_t>>> sections;
  while (!r.done()) {
    auto t = r.u32();
    auto len = r.u64();
    if (len > bytes.size()) throw CheckpointError("checkpoint: section length exceeds file");
    sections.emplace_back(t, r.take(static_cast<std::size_t>(len)));
  }
  std::size_t cursor = 0;
  auto find = [&](std::uint32_t t, bool required) -> std::optional<Reader> {
    if (cursor < sections.size() && sections[cursor].first == t)
      return Reader(sections[cursor++].second, "checkpoint section");
    if (required) throw CheckpointError("checkpoint: missing required section");
    return std::nullopt;
  };

  auto arch = find(kArch, true);
  auto [spec, task] = read_arch(*arch);
  try {
    validate(spec, task);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: invalid architecture: ") + e.what());
  }
  Checkpoint ckpt{Network<float>(spec, task, 0), std::nullopt, std::nullopt};
  auto parm = find(kParm, true);
  read_params(*parm, ckpt.network.parameters());
  auto bufs = find(kBufs, true);
  read_buffers(*bufs, ckpt.network.buffers());

  if (auto head = find(kHead, false)) {
    HeadBundle h;
    h.spec.num_conv = head->i32();
    h.spec.num_fc = head->i32();
    h.spec.conv_channels = head->i32();
    h.spec.kernel = head->i32();
    h.spec.fc_hidden = head->i32();
    h.spec.num_classes = head->i32();
    try {
      validate(h.spec, task);
    } catch (const std::exception& e) {
      throw CheckpointError(std::string("checkpoint: invalid head spec: ") + e.what());
    }
    auto n = head->u32();
    if (n > 64) throw CheckpointError("checkpoint: implausible head count");
    for (std::uint32_t j = 0; j < n; ++j) {
      int unit = head->i32();
      int cin_t = head->i32(), cin_s = head->i32();
      if (cin_t < 1 || cin_s < 1 || cin_t > 1 << 16 || cin_s > 1 << 16)
        throw CheckpointError("checkpoint: implausible head input channels");
      AuxHead<float> ht(h.spec, cin_t, 0), hs(h.spec, cin_s, 0);
      auto tp = head_prefix(FeatureSource::kTeacher, unit);
      auto sp = head_prefix(FeatureSource::kStudent, unit);
      read_params(*head, ht.parameters(tp));
      read_buffers(*head, ht.buffers(tp));
      read_params(*head, hs.parameters(sp));
      read_buffers(*head, hs.buffers(sp));
      h.units.push_back(unit);
      h.teacher.push_back(std::move(ht));
      h.student.push_back(std::move(hs));
    }
    if (!head->done()) throw CheckpointError("checkpoint: trailing bytes in head section");
    ckpt.heads = std::move(h);
  }

  if (auto st = find(kTrst, false)) {
    TrainState s;
    s.epoch = st->i32();
    s.step = st->i64();
    s.run_seed = st->u64();
    s.seeds.init = st->u64();
    s.seeds.shuffle = st->u64();
    s.seeds.augment = st->u64();
    s.seeds.heads = st->u64();
    auto n = st->u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto len = st->u64();
      if (len > bytes.size()) throw CheckpointError("checkpoint: implausible velocity length");
      std::vector<float> v(static_cast<std::size_t>(len));
      for (float& x : v) x = st->f32();
      s.velocity.push_back(std::move(v));
    }
    if (!st->done()) throw CheckpointError("checkpoint: trailing bytes in state section");
    ckpt.state = std::move(s);
  }

  if (cursor != sections.size())
    throw CheckpointError("checkpoint: unknown or out-of-order section");
  if (!parm->done() || !bufs->done() || !arch->done())
    throw CheckpointError("checkpoint: trailing bytes in a section");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
  auto bytes = serialize(ckpt);
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(file.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(file.string() + ": write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError(file.string() + ": cannot open checkpoint");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(file.string() + ": " + e.what());
  }
}

Checkpoint strip_heads(const Checkpoint& ckpt) {
  return Checkpoint{ckpt.network.clone(), std::nullopt, std::nullopt};
}

}  // namespace mhkd
