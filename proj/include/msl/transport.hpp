#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "msl/csv.hpp"
#include "msl/meta.hpp"
#include "msl/splitnet.hpp"

namespace msl {

// ---------------------------------------------------------------------------
// Frame codec. Wire layout, all little-endian:
//   magic "MSL1" | msg_type u8 | dtype u8 | ndim u16 | dims u32[ndim] |
//   payload_len u64 | payload | crc32 u32 over everything before it
// Empty frames carry ndim=1, dims={0}, payload_len=0.
// ---------------------------------------------------------------------------

enum class MsgType : std::uint8_t {
  Hello = 0,
  Smashed = 1,
  SmashedGrad = 2,
  Labels = 3,
  LossReport = 4,
  ParamSync = 5,
  Bye = 6,
};

inline const char* msg_type_name(MsgType t) {
  switch (t) {
    case MsgType::Hello: return "HELLO";
    case MsgType::Smashed: return "SMASHED";
    case MsgType::SmashedGrad: return "SMASHED_GRAD";
    case MsgType::Labels: return "LABELS";
    case MsgType::LossReport: return "LOSS_REPORT";
    case MsgType::ParamSync: return "PARAM_SYNC";
    case MsgType::Bye: return "BYE";
  }
  return "?";
}

enum class WireDtype : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr char kFrameMagic[4] = {'M', 'S', 'L', '1'};

struct Frame {
  MsgType type = MsgType::Hello;
  WireDtype dtype = WireDtype::F32;
  std::vector<std::uint32_t> dims{0};
  std::vector<std::uint8_t> payload;

  static Frame empty(MsgType t) {
    Frame f;
    f.type = t;
    return f;
  }

  template <typename T>
  static Frame from_tensor(MsgType t, const Tensor<T>& ten) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    Frame f;
    f.type = t;
    f.dtype = std::is_same_v<T, float> ? WireDtype::F32 : WireDtype::F64;
    f.dims.clear();
    for (std::size_t i = 0; i < ten.ndim(); ++i)
      f.dims.push_back(static_cast<std::uint32_t>(ten.dim(i)));
    if (f.dims.empty()) f.dims.push_back(0);
    f.payload.resize(ten.numel() * sizeof(T));
    std::memcpy(f.payload.data(), ten.data(), f.payload.size());
    return f;
  }

  static Frame from_scalar(MsgType t, double v) {
    Frame f;
    f.type = t;
    f.dtype = WireDtype::F64;
    f.dims = {1};
    f.payload.resize(sizeof(double));
    std::memcpy(f.payload.data(), &v, sizeof(double));
    return f;
  }

  template <typename T>
  Tensor<T> to_tensor() const {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    const WireDtype want = std::is_same_v<T, float> ? WireDtype::F32 : WireDtype::F64;
    if (dtype != want) throw protocol_error("frame: dtype mismatch");
    std::vector<std::size_t> shape(dims.begin(), dims.end());
    Tensor<T> out(shape);
    if (payload.size() != out.numel() * sizeof(T))
      throw protocol_error("frame: payload/shape mismatch");
    std::memcpy(out.data(), payload.data(), payload.size());
    return out;
  }

  double to_scalar() const {
    if (dtype != WireDtype::F64 || payload.size() != sizeof(double))
      throw protocol_error("frame: expected one f64 value");
    double v;
    std::memcpy(&v, payload.data(), sizeof v);
    return v;
  }

  std::uint64_t payload_elems() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  std::size_t encoded_size() const {
    return 4 + 1 + 1 + 2 + 4 * dims.size() + 8 + payload.size() + 4;
  }
};

/// Reflected CRC-32 (polynomial 0xEDB88320), init/xorout 0xFFFFFFFF.
inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n,
                           std::uint32_t seed = 0xFFFFFFFFu) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

namespace detail {

template <typename T>
void append_pod(std::vector<std::uint8_t>& buf, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof v);
}

template <typename T>
T take_pod(const std::uint8_t* data, std::size_t& off) {
  T v;
  std::memcpy(&v, data + off, sizeof v);
  off += sizeof v;
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  std::uint64_t elems = f.payload_elems();
  const std::size_t dsize = f.dtype == WireDtype::F32 ? 4 : 8;
  if (f.payload.size() != elems * dsize)
    throw protocol_error("encode_frame: payload_len != product(dims) * dtype size");
  if (f.dims.empty() || f.dims.size() > 0xFFFF)
    throw protocol_error("encode_frame: bad rank");
  std::vector<std::uint8_t> buf;
  buf.reserve(f.encoded_size());
  buf.insert(buf.end(), kFrameMagic, kFrameMagic + 4);
  buf.push_back(static_cast<std::uint8_t>(f.type));
  buf.push_back(static_cast<std::uint8_t>(f.dtype));
  detail::append_pod(buf, static_cast<std::uint16_t>(f.dims.size()));
  for (auto d : f.dims) detail::append_pod(buf, d);
  detail::append_pod(buf, static_cast<std::uint64_t>(f.payload.size()));
  buf.insert(buf.end(), f.payload.begin(), f.payload.end());
  detail::append_pod(buf, crc32(buf.data(), buf.size()));
  return buf;
}

/// Decodes one complete frame; `buf` must hold exactly the frame. Throws
/// protocol_error naming the byte offset of the fault.
inline Frame decode_frame(const std::uint8_t* buf, std::size_t len) {
  auto fail = [](const std::string& what, std::size_t off) {
    throw protocol_error("frame: " + what + " at offset " + std::to_string(off));
  };
  if (len < 20) fail("truncated header", len);
  if (std::memcmp(buf, kFrameMagic, 4) != 0) fail("bad magic", 0);
  std::size_t off = 4;
  const auto type_raw = detail::take_pod<std::uint8_t>(buf, off);
  if (type_raw > static_cast<std::uint8_t>(MsgType::Bye)) fail("unknown msg_type", 4);
  const auto dtype_raw = detail::take_pod<std::uint8_t>(buf, off);
  if (dtype_raw > 1) fail("unknown dtype", 5);
  const auto ndim = detail::take_pod<std::uint16_t>(buf, off);
  if (ndim == 0) fail("zero rank", 6);
  if (len < off + 4 * std::size_t(ndim) + 8) fail("truncated dims", len);
  Frame f;
  f.type = static_cast<MsgType>(type_raw);
  f.dtype = static_cast<WireDtype>(dtype_raw);
  f.dims.resize(ndim);
  for (auto& d : f.dims) d = detail::take_pod<std::uint32_t>(buf, off);
  const auto payload_len = detail::take_pod<std::uint64_t>(buf, off);
  const std::size_t dsize = f.dtype == WireDtype::F32 ? 4 : 8;
  if (payload_len != f.payload_elems() * dsize)
    fail("payload_len != product(dims) * dtype size", off - 8);
  if (len != off + payload_len + 4) fail("truncated payload", len);
  f.payload.assign(buf + off, buf + off + payload_len);
  off += payload_len;
  const auto stored = detail::take_pod<std::uint32_t>(buf, off);
  const std::uint32_t computed = crc32(buf, len - 4);
  if (stored != computed) fail("crc mismatch", len - 4);
  return f;
}

// ---------------------------------------------------------------------------
// Byte streams: blocking, reliable, ordered. The loopback queue and the TCP
// socket feed the same codec, so both paths exercise identical bytes.
// ---------------------------------------------------------------------------

class ByteStream {
 public:
  virtual ~ByteStream() = default;
  virtual void send(const std::uint8_t* data, std::size_t n) = 0;
  virtual void recv_exact(std::uint8_t* data, std::size_t n) = 0;
};

struct LoopbackQueue {
  std::mutex m;
  std::condition_variable cv;
  std::deque<std::uint8_t> bytes;
  bool closed = false;
};

class LoopbackStream : public ByteStream {
 public:
  LoopbackStream(std::shared_ptr<LoopbackQueue> in, std::shared_ptr<LoopbackQueue> out,
                 int timeout_ms = 30000)
      : in_(std::move(in)), out_(std::move(out)), timeout_ms_(timeout_ms) {}

  ~LoopbackStream() override {
    std::lock_guard<std::mutex> lock(out_->m);
    out_->closed = true;
    out_->cv.notify_all();
  }

  void send(const std::uint8_t* data, std::size_t n) override {
    std::lock_guard<std::mutex> lock(out_->m);
    if (out_->closed) throw io_error("loopback: peer closed");
    out_->bytes.insert(out_->bytes.end(), data, data + n);
    out_->cv.notify_all();
  }

  void recv_exact(std::uint8_t* data, std::size_t n) override {
    std::unique_lock<std::mutex> lock(in_->m);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms_);
    while (in_->bytes.size() < n) {
      if (in_->closed) throw io_error("loopback: peer closed");
      if (in_->cv.wait_until(lock, deadline) == std::cv_status::timeout)
        throw io_error("loopback: receive timeout");
    }
    std::copy(in_->bytes.begin(), in_->bytes.begin() + static_cast<std::ptrdiff_t>(n), data);
    in_->bytes.erase(in_->bytes.begin(), in_->bytes.begin() + static_cast<std::ptrdiff_t>(n));
  }

 private:
  std::shared_ptr<LoopbackQueue> in_, out_;
  int timeout_ms_;
};

class TcpStream : public ByteStream {
 public:
  explicit TcpStream(int fd, int timeout_ms = 30000) : fd_(fd) {
    timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
    setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    int one = 1;
    setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpStream() override {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;

  static std::unique_ptr<TcpStream> connect(const std::string& host, std::uint16_t port,
                                            int timeout_ms = 30000) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw io_error("tcp: socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw io_error("tcp: bad address " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      ::close(fd);
      throw io_error("tcp: connect to " + host + ":" + std::to_string(port) + " failed: " +
                     std::strerror(errno));
    }
    return std::make_unique<TcpStream>(fd, timeout_ms);
  }

  void send(const std::uint8_t* data, std::size_t n) override {
    std::size_t sent = 0;
    while (sent < n) {
      const ssize_t k = ::send(fd_, data + sent, n - sent, MSG_NOSIGNAL);
      if (k <= 0) throw io_error(std::string("tcp: send failed: ") + std::strerror(errno));
      sent += static_cast<std::size_t>(k);
    }
  }

  void recv_exact(std::uint8_t* data, std::size_t n) override {
    std::size_t got = 0;
    while (got < n) {
      const ssize_t k = ::recv(fd_, data + got, n - got, 0);
      if (k == 0) throw io_error("tcp: peer closed");
      if (k < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK) throw io_error("tcp: receive timeout");
        throw io_error(std::string("tcp: recv failed: ") + std::strerror(errno));
      }
      got += static_cast<std::size_t>(k);
    }
  }

 private:
  int fd_;
};

class TcpListener {
 public:
  explicit TcpListener(std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw io_error("tcp: socket() failed");
    int one = 1;
    setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(fd_, 1) != 0) {
      ::close(fd_);
      throw io_error("tcp: cannot listen on port " + std::to_string(port) + ": " +
                     std::strerror(errno));
    }
    socklen_t len = sizeof addr;
    getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }

  std::unique_ptr<TcpStream> accept(int timeout_ms = 30000) {
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) throw io_error(std::string("tcp: accept failed: ") + std::strerror(errno));
    return std::make_unique<TcpStream>(fd, timeout_ms);
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

// ---------------------------------------------------------------------------
// Endpoints: a role, an address label, a stream, and honest byte counters.
// ---------------------------------------------------------------------------

enum class Role { Device, Aggregator };

class Endpoint {
 public:
  Endpoint(Role role, std::string address, std::unique_ptr<ByteStream> stream)
      : role_(role), address_(std::move(address)), stream_(std::move(stream)) {}

  Role role() const { return role_; }
  const std::string& address() const { return address_; }
  std::uint64_t bytes_sent() const { return sent_; }
  std::uint64_t bytes_received() const { return received_; }

  void send_frame(const Frame& f) {
    const auto buf = encode_frame(f);
    stream_->send(buf.data(), buf.size());
    sent_ += buf.size();
  }

  Frame recv_frame() {
    std::vector<std::uint8_t> buf(8);
    stream_->recv_exact(buf.data(), 8);  // magic, type, dtype, ndim
    std::uint16_t ndim;
    std::memcpy(&ndim, buf.data() + 6, 2);
    if (std::memcmp(buf.data(), kFrameMagic, 4) != 0)
      throw protocol_error("frame: bad magic at offset 0");
    if (ndim == 0) throw protocol_error("frame: zero rank at offset 6");
    const std::size_t mid = 4 * std::size_t(ndim) + 8;
    buf.resize(8 + mid);
    stream_->recv_exact(buf.data() + 8, mid);
    std::uint64_t payload_len;
    std::memcpy(&payload_len, buf.data() + 8 + 4 * std::size_t(ndim), 8);
    if (payload_len > (1ull << 32))
      throw protocol_error("frame: implausible payload length");
    const std::size_t head = buf.size();
    buf.resize(head + payload_len + 4);
    stream_->recv_exact(buf.data() + head, payload_len + 4);
    received_ += buf.size();
    return decode_frame(buf.data(), buf.size());
  }

  /// For the strict alternation state machine: receive and require a type.
  Frame expect(MsgType want) {
    Frame f = recv_frame();
    if (f.type != want)
      throw protocol_error(std::string("out-of-order message: expected ") +
                           msg_type_name(want) + ", got " + msg_type_name(f.type));
    return f;
  }

 private:
  Role role_;
  std::string address_;
  std::unique_ptr<ByteStream> stream_;
  std::uint64_t sent_ = 0;
  std::uint64_t received_ = 0;
};

/// In-process pair of connected endpoints (device first, aggregator second).
/// Frames are fully encoded into and decoded from the shared byte queues.
inline std::pair<Endpoint, Endpoint> loopback_pair(int timeout_ms = 30000) {
  auto a2b = std::make_shared<LoopbackQueue>();
  auto b2a = std::make_shared<LoopbackQueue>();
  return {Endpoint(Role::Device, "loopback",
                   std::make_unique<LoopbackStream>(b2a, a2b, timeout_ms)),
          Endpoint(Role::Aggregator, "loopback",
                   std::make_unique<LoopbackStream>(a2b, b2a, timeout_ms))};
}

// ---------------------------------------------------------------------------
// Sessions. Per-step exchange (device -> aggregator -> device):
//   SMASHED, LABELS  ->  SMASHED_GRAD, LOSS_REPORT
// PARAM_SYNC with an empty payload asks the peer for its half's flattened
// parameters; with a payload it loads them and acks with an empty PARAM_SYNC.
// HELLO opens (f32 fields: version, lr, steps, cut, classes, channels,
// blocks, fc width, push_init flag), BYE closes. Channel corruption happens
// device-side, before sending and after receiving, so the wire stays exact.
// ---------------------------------------------------------------------------

struct SessionConfig {
  double lr = 0.01;
  std::size_t steps = 20;
  bool sync_params_every_step = true;  // fetch W^S after each step (checksums)
  bool push_init = true;               // device uploads the aggregator half after HELLO
  int timeout_ms = 30000;
};

struct SessionLogRow {
  std::size_t step = 0;  // 1-based
  double loss = 0;
  std::uint64_t bytes_fwd = 0;  // smashed + labels frames
  std::uint64_t bytes_bwd = 0;  // gradient + loss frames
  std::uint64_t checksum = 0;   // both halves after the step's updates
};

struct SessionLog {
  std::vector<SessionLogRow> rows;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t fwd_skipped = 0;  // steps lost to channel outage
  std::uint64_t bwd_skipped = 0;
};

inline void write_session_log(const std::string& path, const SessionLog& log) {
  CsvWriter csv(path);
  csv.row({"step", "loss", "bytes_fwd", "bytes_bwd", "checksum"});
  char hex[20];
  for (const auto& r : log.rows) {
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(r.checksum));
    csv.row({csv_num(r.step), csv_num(r.loss), csv_num(r.bytes_fwd), csv_num(r.bytes_bwd), hex});
  }
}

namespace detail {

inline Frame labels_frame(const std::vector<int>& labels) {
  Tensor<float> t({labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<float>(labels[i]);
  return Frame::from_tensor(MsgType::Labels, t);
}

inline std::vector<int> labels_from_frame(const Frame& f) {
  const auto t = f.to_tensor<float>();
  std::vector<int> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(t[i]);
  return out;
}

struct HelloFields {
  double lr = 0;
  std::size_t steps = 0;
  std::size_t cut = 0;
  std::size_t num_classes = 0;
  std::size_t conv_channels = 0;
  std::size_t conv_blocks = 0;
  std::size_t fc_width = 0;
  bool push_init = false;
};

inline Frame hello_frame(const HelloFields& h) {
  Tensor<float> t({9});
  t[0] = 1.0f;  // protocol version
  t[1] = static_cast<float>(h.lr);
  t[2] = static_cast<float>(h.steps);
  t[3] = static_cast<float>(h.cut);
  t[4] = static_cast<float>(h.num_classes);
  t[5] = static_cast<float>(h.conv_channels);
  t[6] = static_cast<float>(h.conv_blocks);
  t[7] = static_cast<float>(h.fc_width);
  t[8] = h.push_init ? 1.0f : 0.0f;
  return Frame::from_tensor(MsgType::Hello, t);
}

inline HelloFields hello_fields(const Frame& f) {
  const auto t = f.to_tensor<float>();
  if (t.numel() != 9) throw protocol_error("HELLO: expected 9 fields");
  if (t[0] != 1.0f) throw protocol_error("HELLO: unsupported protocol version");
  HelloFields h;
  h.lr = t[1];
  h.steps = static_cast<std::size_t>(t[2]);
  h.cut = static_cast<std::size_t>(t[3]);
  h.num_classes = static_cast<std::size_t>(t[4]);
  h.conv_channels = static_cast<std::size_t>(t[5]);
  h.conv_blocks = static_cast<std::size_t>(t[6]);
  h.fc_width = static_cast<std::size_t>(t[7]);
  h.push_init = t[8] != 0.0f;
  return h;
}

}  // namespace detail

/// Serves one training session on a connected endpoint: answers each
/// SMASHED+LABELS with the aggregator pass (SGD update at the HELLO-carried
/// rate) and the resulting SMASHED_GRAD+LOSS_REPORT. Any out-of-order
/// message aborts the session with a protocol_error.
inline SessionLog run_aggregator(Endpoint& ep, const ModelConfig& agg_cfg,
                                 Parameters<float>& agg_params) {
  SessionLog log;
  const Frame hello = ep.expect(MsgType::Hello);
  const auto h = detail::hello_fields(hello);
  if (h.num_classes != agg_cfg.num_classes)
    throw protocol_error("HELLO: peer expects " + std::to_string(h.num_classes) +
                         " classes, serving " + std::to_string(agg_cfg.num_classes));
  ep.send_frame(hello);  // echo: accepted
  std::size_t step = 0;

  if (h.push_init) {
    const Frame init = ep.expect(MsgType::ParamSync);
    if (init.payload.empty()) throw protocol_error("PARAM_SYNC: expected initial parameters");
    agg_params.load_flattened(init.to_tensor<float>());
    ep.send_frame(Frame::empty(MsgType::ParamSync));
  }

  for (;;) {
    Frame f = ep.recv_frame();
    if (f.type == MsgType::Bye) {
      ep.send_frame(Frame::empty(MsgType::Bye));
      break;
    }
    if (f.type == MsgType::ParamSync) {
      if (f.payload.empty()) {
        ep.send_frame(Frame::from_tensor(MsgType::ParamSync, agg_params.flattened()));
      } else {
        agg_params.load_flattened(f.to_tensor<float>());
        ep.send_frame(Frame::empty(MsgType::ParamSync));
      }
      continue;
    }
    if (f.type != MsgType::Smashed)
      throw protocol_error(std::string("out-of-order message: expected SMASHED, got ") +
                           msg_type_name(f.type));
    const Frame lf = ep.expect(MsgType::Labels);

    const Tensor<float> smashed = f.to_tensor<float>();
    const std::vector<int> labels = detail::labels_from_frame(lf);
    AggregatorPass<float> pass =
        aggregator_pass(agg_cfg, agg_params, smashed, labels, /*want_grad=*/true, h.lr);
    const Frame gf = Frame::from_tensor(MsgType::SmashedGrad, pass.smashed_grad);
    ep.send_frame(gf);
    ep.send_frame(Frame::from_scalar(MsgType::LossReport, pass.loss));

    SessionLogRow row;
    row.step = ++step;
    row.loss = pass.loss;
    row.bytes_fwd = f.encoded_size() + lf.encoded_size();
    row.bytes_bwd = gf.encoded_size() + Frame::from_scalar(MsgType::LossReport, 0).encoded_size();
    row.checksum = agg_params.checksum();
    log.rows.push_back(row);
  }
  log.bytes_sent = ep.bytes_sent();
  log.bytes_received = ep.bytes_received();
  return log;
}

namespace detail {

inline std::uint64_t joined_checksum(const Parameters<float>& device,
                                     const Parameters<float>& agg) {
  std::uint64_t h = device.checksum();
  return fnv1a64(&h, sizeof h, agg.checksum());
}

}  // namespace detail

/// Drives a training session from the device side. `pair` supplies the
/// device half and (as a shadow used for init push and checksums) the
/// aggregator half; the shadow is refreshed via PARAM_SYNC when
/// sync_params_every_step is set. The same batch is used every step.
inline SessionLog run_device(Endpoint& ep, SplitPair<float>& pair, const Tensor<float>& x,
                             const std::vector<int>& y, const SessionConfig& cfg,
                             ChannelPair& chan) {
  SessionLog log;
  detail::HelloFields h;
  h.lr = cfg.lr;
  h.steps = cfg.steps;
  h.cut = pair.cut.block_index;
  h.num_classes = pair.num_classes;
  h.push_init = cfg.push_init;
  // architecture echo for validation on the serving side
  for (const auto& l : pair.device_cfg.layers)
    if (l.kind == LayerKind::Conv2d) {
      h.conv_channels = l.channels;
      break;
    }
  h.conv_blocks = conv_block_count(pair.device_cfg) + conv_block_count(pair.agg_cfg);
  for (const auto& l : pair.agg_cfg.layers)
    if (l.kind == LayerKind::FullyConnected) {
      h.fc_width = l.channels;
      break;
    }
  ep.send_frame(detail::hello_frame(h));
  ep.expect(MsgType::Hello);

  if (cfg.push_init) {
    ep.send_frame(Frame::from_tensor(MsgType::ParamSync, pair.agg_params.flattened()));
    ep.expect(MsgType::ParamSync);
  }

  ChannelDiag diag;
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    auto [smashed, trace] = device_forward(pair, x);
    if (!chan.fwd.apply(smashed.tensor).delivered) {
      ++diag.fwd_skipped;
      continue;  // outage: nothing goes on the wire this step
    }
    const Frame sf = Frame::from_tensor(MsgType::Smashed, smashed.tensor);
    const Frame lf = detail::labels_frame(y);
    ep.send_frame(sf);
    ep.send_frame(lf);
    const Frame gf = ep.expect(MsgType::SmashedGrad);
    const Frame lossf = ep.expect(MsgType::LossReport);
    Tensor<float> grad = gf.to_tensor<float>();
    bool apply_update = true;
    if (chan.backward_enabled && !chan.bwd.apply(grad).delivered) {
      ++diag.bwd_skipped;
      apply_update = false;
    }
    if (apply_update)
      device_backward_step(pair.device_cfg, pair.device_params, trace, grad, cfg.lr);

    SessionLogRow row;
    row.step = s;
    row.loss = lossf.to_scalar();
    row.bytes_fwd = sf.encoded_size() + lf.encoded_size();
    row.bytes_bwd = gf.encoded_size() + lossf.encoded_size();
    if (cfg.sync_params_every_step) {
      ep.send_frame(Frame::empty(MsgType::ParamSync));
      const Frame pf = ep.expect(MsgType::ParamSync);
      pair.agg_params.load_flattened(pf.to_tensor<float>());
    }
    row.checksum = detail::joined_checksum(pair.device_params, pair.agg_params);
    log.rows.push_back(row);
  }
  ep.send_frame(Frame::empty(MsgType::Bye));
  ep.expect(MsgType::Bye);
  log.bytes_sent = ep.bytes_sent();
  log.bytes_received = ep.bytes_received();
  log.fwd_skipped = diag.fwd_skipped;
  log.bwd_skipped = diag.bwd_skipped;
  return log;
}

/// The same training loop executed by direct function calls, producing a log
/// whose rows (losses, per-step byte accounting, checksums) are comparable
/// field-for-field with the transported runs.
inline SessionLog run_direct(SplitPair<float>& pair, const Tensor<float>& x,
                             const std::vector<int>& y, const SessionConfig& cfg,
                             ChannelPair& chan) {
  SessionLog log;
  ChannelDiag diag;
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    auto [smashed, trace] = device_forward(pair, x);
    if (!chan.fwd.apply(smashed.tensor).delivered) {
      ++diag.fwd_skipped;
      continue;
    }
    const std::size_t smashed_frame = Frame::from_tensor(MsgType::Smashed, smashed.tensor)
                                          .encoded_size();  // what the wire would carry
    AggregatorPass<float> pass = aggregator_pass(pair.agg_cfg, pair.agg_params, smashed.tensor,
                                                 y, /*want_grad=*/true, cfg.lr);
    const std::size_t grad_frame =
        Frame::from_tensor(MsgType::SmashedGrad, pass.smashed_grad).encoded_size();
    bool apply_update = true;
    if (chan.backward_enabled && !chan.bwd.apply(pass.smashed_grad).delivered) {
      ++diag.bwd_skipped;
      apply_update = false;
    }
    if (apply_update)
      device_backward_step(pair.device_cfg, pair.device_params, trace, pass.smashed_grad,
                           cfg.lr);

    SessionLogRow row;
    row.step = s;
    row.loss = pass.loss;
    row.bytes_fwd = smashed_frame + detail::labels_frame(y).encoded_size();
    row.bytes_bwd = grad_frame + Frame::from_scalar(MsgType::LossReport, 0).encoded_size();
    row.checksum = detail::joined_checksum(pair.device_params, pair.agg_params);
    log.rows.push_back(row);
  }
  log.fwd_skipped = diag.fwd_skipped;
  log.bwd_skipped = diag.bwd_skipped;
  return log;
}

}  // namespace msl
