#pragma once

// Pose-controlled frame synthesis over HTTP (session management, single
// frames) and WebSocket (pose streaming with latest-wins backpressure).
//
// Wire formats
//   pose:            12 little-endian f64, row-major [R|t], mapping target
//                    camera coordinates into source camera coordinates.
//   stream request:  u32 sequence, u32 flags (bit 0: also send depth), pose
//                    -> 104 bytes, little-endian.
//   stream reply:    u32 sequence, u32 payload kind (1 color, 2 depth
//                    visualization), PNG bytes. Errors are text messages
//                    holding a JSON object {"error": ..., "seq": ...}.

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <array>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "nvs/geometry.hpp"
#include "nvs/io.hpp"
#include "nvs/scenes.hpp"
#include "nvs/tae.hpp"
#include "nvs/train.hpp"
#include "nvs/warp.hpp"

namespace nvs::service {

/// Error carrying the HTTP status it maps to.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

// ---------------------------------------------------------------------------
// Wire format

inline constexpr std::size_t kPoseBytes = 96;
inline constexpr std::size_t kStreamRequestBytes = 104;
inline constexpr std::size_t kFrameHeaderBytes = 8;
inline constexpr std::uint32_t kWantDepth = 1;

enum class PayloadKind : std::uint32_t { color = 1, depth = 2 };

namespace detail {

inline void put_u32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = std::uint8_t(v >> (8 * i));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}
inline void put_f64(std::uint8_t* p, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) p[i] = std::uint8_t(v >> (8 * i));
}
inline double get_f64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

inline RigidTransform checked_pose(const std::array<double, 12>& v) {
  for (double x : v)
    if (!std::isfinite(x)) throw ServiceError(400, "pose: non-finite value");
  const auto t = RigidTransform::from_row_major(v);
  if (!t.is_valid(1e-6)) throw ServiceError(400, "pose: rotation part is not a rotation matrix");
  return t;
}

}  // namespace detail

inline std::array<std::uint8_t, kPoseBytes> encode_pose(const RigidTransform& t) {
  std::array<std::uint8_t, kPoseBytes> out{};
  const auto v = t.to_row_major();
  for (std::size_t i = 0; i < 12; ++i) detail::put_f64(out.data() + 8 * i, v[i]);
  return out;
}

inline RigidTransform decode_pose(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kPoseBytes) throw ServiceError(400, "pose: expected 96 bytes, got " + std::to_string(bytes.size()));
  std::array<double, 12> v{};
  for (std::size_t i = 0; i < 12; ++i) v[i] = detail::get_f64(bytes.data() + 8 * i);
  return detail::checked_pose(v);
}

/// "r00,r01,...,t2" as used by GET /session/{id}/frame?pose=.
inline RigidTransform parse_pose_query(std::string_view text) {
  std::array<double, 12> v{};
  std::size_t pos = 0;
  for (std::size_t i = 0; i < 12; ++i) {
    const std::size_t end = i < 11 ? text.find(',', pos) : text.size();
    if (end == std::string_view::npos) throw ServiceError(400, "pose: expected 12 comma-separated numbers");
    const auto field = text.substr(pos, end - pos);
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v[i]);
    if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
      throw ServiceError(400, "pose: bad number '" + std::string(field) + "'");
    }
    pos = end + 1;
  }
  return detail::checked_pose(v);
}

inline std::string format_pose_query(const RigidTransform& t) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto v = t.to_row_major();
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

struct StreamRequest {
  std::uint32_t seq = 0;
  std::uint32_t flags = 0;
  RigidTransform pose;
};

inline std::vector<std::uint8_t> encode_stream_request(const StreamRequest& r) {
  std::vector<std::uint8_t> out(kStreamRequestBytes);
  detail::put_u32(out.data(), r.seq);
  detail::put_u32(out.data() + 4, r.flags);
  const auto pose = encode_pose(r.pose);
  std::copy(pose.begin(), pose.end(), out.begin() + 8);
  return out;
}

/// Throws ServiceError on a malformed message; `seq_out` receives the
/// sequence number whenever at least the header could be read.
inline StreamRequest decode_stream_request(std::span<const std::uint8_t> bytes, std::optional<std::uint32_t>* seq_out = nullptr) {
  if (bytes.size() >= 4 && seq_out) *seq_out = detail::get_u32(bytes.data());
  if (bytes.size() != kStreamRequestBytes) {
    throw ServiceError(400, "stream: expected 104-byte pose message, got " + std::to_string(bytes.size()));
  }
  StreamRequest r;
  r.seq = detail::get_u32(bytes.data());
  r.flags = detail::get_u32(bytes.data() + 4);
  if (r.flags & ~kWantDepth) throw ServiceError(400, "stream: unknown flag bits");
  r.pose = decode_pose(bytes.subspan(8));
  return r;
}

struct FrameMessage {
  std::uint32_t seq = 0;
  PayloadKind kind = PayloadKind::color;
  std::vector<std::uint8_t> png;
};

inline std::vector<std::uint8_t> encode_frame_message(const FrameMessage& m) {
  std::vector<std::uint8_t> out(kFrameHeaderBytes + m.png.size());
  detail::put_u32(out.data(), m.seq);
  detail::put_u32(out.data() + 4, std::uint32_t(m.kind));
  std::copy(m.png.begin(), m.png.end(), out.begin() + kFrameHeaderBytes);
  return out;
}

inline FrameMessage decode_frame_message(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderBytes) throw ServiceError(400, "frame: message shorter than its header");
  FrameMessage m;
  m.seq = detail::get_u32(bytes.data());
  const std::uint32_t kind = detail::get_u32(bytes.data() + 4);
  if (kind != 1 && kind != 2) throw ServiceError(400, "frame: unknown payload kind " + std::to_string(kind));
  m.kind = PayloadKind(kind);
  m.png.assign(bytes.begin() + kFrameHeaderBytes, bytes.end());
  return m;
}

// ---------------------------------------------------------------------------
// Sessions

enum class Mode { learned, oracle };

struct SessionRequest {
  Mode mode = Mode::oracle;
  std::uint64_t seed = 0;
  std::string scene = "object";  // object | corridor
  double azimuth = 0.0;
  double elevation = 10.0;
  double radius = 3.0;
  int size = 64;  // oracle mode; learned mode uses the model's size
  std::optional<std::string> checkpoint;
  std::optional<Image> image;  // uploaded source (learned mode)
  std::optional<CameraIntrinsics> intrinsics;
};

inline SessionRequest parse_session_request(const std::string& body) {
  nlohmann::json j;
  try {
    j = body.empty() ? nlohmann::json::object() : nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(400, std::string("session: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ServiceError(400, "session: request body must be a JSON object");
  SessionRequest r;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "mode") {
        const auto m = value.get<std::string>();
        if (m == "oracle") r.mode = Mode::oracle;
        else if (m == "learned") r.mode = Mode::learned;
        else throw ServiceError(400, "session: unknown mode '" + m + "'");
      } else if (key == "seed") {
        r.seed = value.get<std::uint64_t>();
      } else if (key == "scene") {
        r.scene = value.get<std::string>();
        if (r.scene != "object" && r.scene != "corridor") throw ServiceError(400, "session: unknown scene '" + r.scene + "'");
      } else if (key == "azimuth") {
        r.azimuth = value.get<double>();
      } else if (key == "elevation") {
        r.elevation = value.get<double>();
      } else if (key == "radius") {
        r.radius = value.get<double>();
      } else if (key == "size") {
        r.size = value.get<int>();
      } else if (key == "checkpoint") {
        r.checkpoint = value.get<std::string>();
      } else if (key == "image") {
        const auto b64 = value.get<std::string>();
        std::vector<std::uint8_t> png(boost::beast::detail::base64::decoded_size(b64.size()));
        const auto [written, read] = boost::beast::detail::base64::decode(png.data(), b64.data(), b64.size());
        if (read != b64.size()) throw ServiceError(400, "session: image is not valid base64");
        png.resize(written);
        try {
          r.image = io::decode_png(png.data(), png.size());
        } catch (const io::IoError& e) {
          throw ServiceError(400, std::string("session: ") + e.what());
        }
      } else if (key == "intrinsics") {
        CameraIntrinsics k;
        k.fx = value.at("fx").get<double>();
        k.fy = value.at("fy").get<double>();
        k.cx = value.at("cx").get<double>();
        k.cy = value.at("cy").get<double>();
        r.intrinsics = k;
      } else {
        throw ServiceError(400, "session: unknown field '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(400, std::string("session: bad field type: ") + e.what());
  }
  if (!(r.radius > 0)) throw ServiceError(400, "session: radius must be positive");
  if (r.size < 8 || r.size > 1024) throw ServiceError(400, "session: size must lie in [8, 1024]");
  if (r.image && r.mode != Mode::learned) throw ServiceError(400, "session: uploaded images need learned mode");
  if (r.image.has_value() != r.intrinsics.has_value()) throw ServiceError(400, "session: image and intrinsics go together");
  return r;
}

struct Frame {
  Image color;
  std::optional<Image> depth;  // visualization: near = bright
  double render_ms = 0.0;
};

/// Grayscale depth visualization over [d_min, d_max], near = bright.
inline Image depth_visualization(const DepthMap& d, double d_min, double d_max) {
  Image out(d.width, d.height, 1);
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    out.data[i] = float(std::clamp(1.0 - (d.values[i] - d_min) / (d_max - d_min), 0.0, 1.0));
  }
  return out;
}

class Session {
 public:
  Session(std::string id, Mode mode, scenes::ViewSample source, std::optional<scenes::SceneSpec> spec,
          std::shared_ptr<const TaeModel<float>> model)
      : id_(std::move(id)), mode_(mode), source_(std::move(source)), spec_(std::move(spec)), model_(std::move(model)) {}

  const std::string& id() const { return id_; }
  Mode mode() const { return mode_; }
  const scenes::ViewSample& source() const { return source_; }

  /// Synthesizes the view at `t_ts` (target camera -> source camera). At most
  /// one synthesis runs per session at a time.
  Frame render(const RigidTransform& t_ts, bool want_depth) const {
    if (!t_ts.is_valid(1e-6)) throw ServiceError(400, "pose: rotation part is not a rotation matrix");
    std::lock_guard lock(mutex_);
    const auto start = std::chrono::steady_clock::now();
    const auto& k = source_.intrinsics;
    Frame f;
    if (mode_ == Mode::oracle) {
      const auto target = scenes::raycast(*spec_, compose(source_.pose, t_ts), k);
      f.color = synthesize_oracle(source_.image, target.depth, invert(t_ts), k);
      if (want_depth) f.depth = depth_visualization(target.depth, spec_->d_min, spec_->d_max);
    } else {
      const auto s = synthesize(*model_, source_.image, invert(t_ts), k);
      f.color = s.image;
      if (want_depth) {
        if (s.depth.values.empty()) throw ServiceError(400, "depth: this model predicts flow, not depth");
        f.depth = depth_visualization(s.depth, model_->config().d_min, model_->config().d_max);
      }
    }
    f.render_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return f;
  }

 private:
  std::string id_;
  Mode mode_;
  scenes::ViewSample source_;
  std::optional<scenes::SceneSpec> spec_;
  std::shared_ptr<const TaeModel<float>> model_;
  mutable std::mutex mutex_;
};

/// Loads each checkpoint once; models are immutable and shared.
class ModelCache {
 public:
  std::shared_ptr<const TaeModel<float>> get(const std::string& path) {
    std::lock_guard lock(mutex_);
    if (auto it = models_.find(path); it != models_.end()) return it->second;
    if (!std::filesystem::exists(path)) throw ServiceError(404, "unknown checkpoint: " + path);
    try {
      auto m = std::make_shared<const TaeModel<float>>(load_model<float>(path));
      models_.emplace(path, m);
      return m;
    } catch (const std::exception& e) {
      throw ServiceError(404, "unknown checkpoint: " + path + " (" + e.what() + ")");
    }
  }

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const TaeModel<float>>> models_;
};

class SessionRegistry {
 public:
  explicit SessionRegistry(std::optional<std::string> default_checkpoint = {})
      : default_checkpoint_(std::move(default_checkpoint)), rng_(std::random_device{}()) {}

  std::shared_ptr<Session> create(const SessionRequest& r) {
    std::shared_ptr<const TaeModel<float>> model;
    std::optional<scenes::SceneSpec> spec;
    scenes::ViewSample source;
    if (r.mode == Mode::learned) {
      const auto path = r.checkpoint ? r.checkpoint : default_checkpoint_;
      if (!path) throw ServiceError(400, "session: learned mode needs a checkpoint");
      model = models_.get(*path);
    }
    if (r.image) {
      const int s = model->config().image_size;
      if (r.image->width != s || r.image->height != s) {
        throw ServiceError(400, "session: uploaded image must be " + std::to_string(s) + "x" + std::to_string(s));
      }
      CameraIntrinsics k = *r.intrinsics;
      k.width = k.height = s;
      try {
        k.validate();
      } catch (const std::invalid_argument& e) {
        throw ServiceError(400, std::string("session: ") + e.what());
      }
      source.image = train::to_model_channels(*r.image, model->config().image_channels);
      source.intrinsics = k;
      source.pose = RigidTransform::identity();
    } else {
      spec = r.scene == "corridor" ? scenes::corridor_scene(r.seed) : scenes::random_object_scene(r.seed);
      const int s = model ? model->config().image_size : r.size;
      const auto pose = r.scene == "corridor" ? RigidTransform::identity() : scenes::orbit_pose(r.azimuth, r.elevation, r.radius);
      source = scenes::raycast(*spec, pose, CameraIntrinsics::centered(s));
      if (model) source.image = train::to_model_channels(source.image, model->config().image_channels);
    }
    std::lock_guard lock(mutex_);
    std::string id;
    do {
      std::ostringstream os;
      os << std::hex << std::setw(16) << std::setfill('0') << rng_();
      id = os.str();
    } while (sessions_.count(id));
    auto session = std::make_shared<Session>(id, r.mode, std::move(source), std::move(spec), std::move(model));
    sessions_.emplace(id, session);
    return session;
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session: " + id);
    return it->second;
  }

  bool erase(const std::string& id) {
    std::lock_guard lock(mutex_);
    return sessions_.erase(id) > 0;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
  }

 private:
  std::optional<std::string> default_checkpoint_;
  ModelCache models_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Bind address

struct BindAddress {
  std::string host = "127.0.0.1";
  std::uint16_t port = 8080;
};

inline constexpr const char* kBindEnv = "NVS_BIND";

/// "host:port", "host" or ":port".
inline BindAddress parse_bind(const std::string& text, BindAddress fallback = {}) {
  BindAddress b = fallback;
  const auto colon = text.rfind(':');
  const std::string host = colon == std::string::npos ? text : text.substr(0, colon);
  if (!host.empty()) b.host = host;
  if (colon != std::string::npos) {
    const std::string port = text.substr(colon + 1);
    unsigned value = 0;
    const auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
    if (ec != std::errc() || ptr != port.data() + port.size() || value > 65535) {
      throw std::invalid_argument("bind address: bad port '" + port + "'");
    }
    b.port = std::uint16_t(value);
  }
  return b;
}

/// Environment first, then explicit flags on top.
inline BindAddress resolve_bind(const char* env_value, const std::optional<std::string>& host_flag,
                                const std::optional<std::uint16_t>& port_flag) {
  BindAddress b;
  if (env_value && *env_value) b = parse_bind(env_value);
  if (host_flag) b.host = *host_flag;
  if (port_flag) b.port = *port_flag;
  return b;
}

// ---------------------------------------------------------------------------
// Server

struct ServerOptions {
  BindAddress bind;
  std::size_t io_threads = 2;
  std::size_t render_threads = 2;
  std::optional<std::string> default_checkpoint;
  std::ostream* log = nullptr;
};

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

class Server;

namespace detail {

struct Context {
  SessionRegistry sessions;
  net::thread_pool render_pool;
  std::ostream* log = nullptr;
  std::mutex log_mutex;

  Context(std::optional<std::string> checkpoint, std::size_t render_threads, std::ostream* log_stream)
      : sessions(std::move(checkpoint)), render_pool(std::max<std::size_t>(1, render_threads)), log(log_stream) {}

  void write_log(const std::string& line) {
    if (!log) return;
    std::lock_guard lock(log_mutex);
    *log << line << std::endl;
  }
};

inline std::string error_json(const std::string& what, std::optional<std::uint32_t> seq = {}) {
  nlohmann::json j{{"error", what}};
  if (seq) j["seq"] = *seq;
  return j.dump();
}

/// WebSocket stream for one session. Renders run on the shared render pool;
/// while one is in flight the newest pending request replaces older ones.
class StreamConnection : public std::enable_shared_from_this<StreamConnection> {
 public:
  StreamConnection(tcp::socket&& socket, std::shared_ptr<Session> session, std::shared_ptr<Context> ctx)
      : ws_(std::move(socket)), session_(std::move(session)), ctx_(std::move(ctx)) {}

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.read_message_max(1 << 16);
    ws_.async_accept(req, beast::bind_front_handler(&StreamConnection::on_accept, shared_from_this()));
  }

 private:
  struct Outgoing {
    bool binary = true;
    std::string data;
  };

  void on_accept(beast::error_code ec) {
    if (ec) return;
    do_read();
  }

  void do_read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&StreamConnection::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) return;  // closed or failed; pending work finishes and is dropped
    const auto data = buffer_.data();
    std::span<const std::uint8_t> bytes(static_cast<const std::uint8_t*>(data.data()), data.size());
    std::optional<std::uint32_t> seq;
    try {
      if (!ws_.got_binary()) throw ServiceError(400, "stream: pose messages must be binary");
      StreamRequest r = decode_stream_request(bytes, &seq);
      if (busy_) {
        pending_ = r;  // latest wins
      } else {
        start_render(r);
      }
    } catch (const ServiceError& e) {
      enqueue({false, error_json(e.what(), seq)});
    }
    buffer_.consume(buffer_.size());
    do_read();
  }

  void start_render(const StreamRequest& r) {
    busy_ = true;
    net::post(ctx_->render_pool, [self = shared_from_this(), r] {
      std::vector<Outgoing> out;
      try {
        const Frame f = self->session_->render(r.pose, r.flags & kWantDepth);
        out.push_back({true, to_string(encode_frame_message({r.seq, PayloadKind::color, io::encode_png(f.color)}))});
        if (f.depth) out.push_back({true, to_string(encode_frame_message({r.seq, PayloadKind::depth, io::encode_png(*f.depth)}))});
        std::ostringstream line;
        line << "stream session=" << self->session_->id() << " seq=" << r.seq << " render_ms=" << f.render_ms;
        self->ctx_->write_log(line.str());
      } catch (const std::exception& e) {
        out.push_back({false, error_json(e.what(), r.seq)});
      }
      net::post(self->ws_.get_executor(), [self, out = std::move(out)]() mutable { self->on_rendered(std::move(out)); });
    });
  }

  void on_rendered(std::vector<Outgoing> out) {
    for (auto& o : out) enqueue(std::move(o));
    busy_ = false;
    if (pending_) {
      const StreamRequest next = *pending_;
      pending_.reset();
      start_render(next);
    }
  }

  static std::string to_string(const std::vector<std::uint8_t>& v) { return std::string(v.begin(), v.end()); }

  void enqueue(Outgoing o) {
    queue_.push_back(std::move(o));
    if (!writing_) do_write();
  }

  void do_write() {
    writing_ = true;
    ws_.binary(queue_.front().binary);
    ws_.async_write(net::buffer(queue_.front().data), beast::bind_front_handler(&StreamConnection::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    writing_ = false;
    if (ec) return;
    queue_.pop_front();
    if (!queue_.empty()) do_write();
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  std::shared_ptr<Session> session_;
  std::shared_ptr<Context> ctx_;
  bool busy_ = false;
  bool writing_ = false;
  std::optional<StreamRequest> pending_;
  std::deque<Outgoing> queue_;
};

class HttpConnection : public std::enable_shared_from_this<HttpConnection> {
 public:
  HttpConnection(tcp::socket&& socket, std::shared_ptr<Context> ctx) : stream_(std::move(socket)), ctx_(std::move(ctx)) {}

  void run() {
    net::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpConnection::do_read, shared_from_this()));
  }

 private:
  void do_read() {
    parser_.emplace();
    parser_->body_limit(16u << 20);
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, *parser_, beast::bind_front_handler(&HttpConnection::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    auto req = parser_->release();
    if (websocket::is_upgrade(req)) {
      const auto target = std::string(req.target());
      const std::string prefix = "/session/", suffix = "/stream";
      if (target.rfind(prefix, 0) == 0 && target.size() > prefix.size() + suffix.size() &&
          target.compare(target.size() - suffix.size(), suffix.size(), suffix) == 0) {
        const auto id = target.substr(prefix.size(), target.size() - prefix.size() - suffix.size());
        try {
          auto session = ctx_->sessions.find(id);
          stream_.expires_never();
          std::make_shared<StreamConnection>(stream_.release_socket(), std::move(session), ctx_)->run(std::move(req));
          return;
        } catch (const ServiceError& e) {
          return send(error_response(req, e.status(), e.what()));
        }
      }
      return send(error_response(req, 404, "no stream at " + target));
    }
    send(handle(req));
  }

  static http::response<http::string_body> error_response(const http::request<http::string_body>& req, int status,
                                                          const std::string& what) {
    http::response<http::string_body> res{http::status(status), req.version()};
    res.set(http::field::content_type, "application/json");
    res.keep_alive(req.keep_alive());
    res.body() = error_json(what);
    res.prepare_payload();
    return res;
  }

  static http::response<http::string_body> json_response(const http::request<http::string_body>& req, http::status status,
                                                         const nlohmann::json& body) {
    http::response<http::string_body> res{status, req.version()};
    res.set(http::field::content_type, "application/json");
    res.keep_alive(req.keep_alive());
    res.body() = body.dump();
    res.prepare_payload();
    return res;
  }

  http::response<http::string_body> handle(const http::request<http::string_body>& req) {
    try {
      std::string target(req.target());
      std::string query;
      if (const auto q = target.find('?'); q != std::string::npos) {
        query = target.substr(q + 1);
        target.resize(q);
      }
      if (target == "/health") {
        if (req.method() != http::verb::get) throw ServiceError(405, "method not allowed");
        return json_response(req, http::status::ok, {{"status", "ok"}, {"sessions", ctx_->sessions.size()}});
      }
      if (target == "/session") {
        if (req.method() != http::verb::post) throw ServiceError(405, "method not allowed");
        const auto s = ctx_->sessions.create(parse_session_request(req.body()));
        ctx_->write_log("session created id=" + s->id());
        return json_response(req, http::status::created,
                             {{"id", s->id()},
                              {"mode", s->mode() == Mode::oracle ? "oracle" : "learned"},
                              {"width", s->source().intrinsics.width},
                              {"height", s->source().intrinsics.height}});
      }
      const std::string prefix = "/session/";
      if (target.rfind(prefix, 0) == 0) {
        const std::string rest = target.substr(prefix.size());
        const auto slash = rest.find('/');
        const std::string id = rest.substr(0, slash);
        const std::string sub = slash == std::string::npos ? "" : rest.substr(slash);
        if (sub.empty() && req.method() == http::verb::delete_) {
          if (!ctx_->sessions.erase(id)) throw ServiceError(404, "unknown session: " + id);
          http::response<http::string_body> res{http::status::no_content, req.version()};
          res.keep_alive(req.keep_alive());
          return res;
        }
        if (sub == "/frame" && req.method() == http::verb::get) return frame(req, id, query);
      }
      throw ServiceError(404, "no route for " + std::string(req.method_string()) + " " + target);
    } catch (const ServiceError& e) {
      return error_response(req, e.status(), e.what());
    } catch (const std::exception& e) {
      return error_response(req, 500, e.what());
    }
  }

  http::response<http::string_body> frame(const http::request<http::string_body>& req, const std::string& id,
                                          const std::string& query) {
    const auto session = ctx_->sessions.find(id);
    std::optional<RigidTransform> pose;
    bool depth = false;
    std::size_t pos = 0;
    while (pos <= query.size() && !query.empty()) {
      const auto amp = query.find('&', pos);
      const std::string item = query.substr(pos, amp == std::string::npos ? std::string::npos : amp - pos);
      const auto eq = item.find('=');
      const std::string key = item.substr(0, eq), value = eq == std::string::npos ? "" : item.substr(eq + 1);
      if (key == "pose") pose = parse_pose_query(value);
      else if (key == "kind") {
        if (value == "depth") depth = true;
        else if (value != "color") throw ServiceError(400, "unknown kind '" + value + "'");
      } else {
        throw ServiceError(400, "unknown query parameter '" + key + "'");
      }
      if (amp == std::string::npos) break;
      pos = amp + 1;
    }
    if (!pose) throw ServiceError(400, "missing pose parameter");
    const Frame f = session->render(*pose, depth);
    const auto png = io::encode_png(depth ? *f.depth : f.color);
    std::ostringstream line;
    line << "frame session=" << id << " render_ms=" << f.render_ms;
    ctx_->write_log(line.str());
    http::response<http::string_body> res{http::status::ok, req.version()};
    res.set(http::field::content_type, "image/png");
    res.set("X-Render-Ms", std::to_string(f.render_ms));
    res.keep_alive(req.keep_alive());
    res.body().assign(png.begin(), png.end());
    res.prepare_payload();
    return res;
  }

  void send(http::response<http::string_body>&& res) {
    auto sp = std::make_shared<http::response<http::string_body>>(std::move(res));
    http::async_write(stream_, *sp, [self = shared_from_this(), sp](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!sp->keep_alive()) {
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
        return;
      }
      self->do_read();
    });
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  std::optional<http::request_parser<http::string_body>> parser_;
  std::shared_ptr<Context> ctx_;
};

}  // namespace detail

class Server {
 public:
  explicit Server(ServerOptions opt)
      : opt_(std::move(opt)),
        ctx_(std::make_shared<detail::Context>(opt_.default_checkpoint, opt_.render_threads, opt_.log)),
        acceptor_(ioc_) {}

  ~Server() { stop(); }
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts serving on background threads. Port 0 picks a free port.
  void start() {
    const tcp::endpoint ep(net::ip::make_address(opt_.bind.host), opt_.bind.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen(net::socket_base::max_listen_connections);
    do_accept();
    for (std::size_t i = 0; i < std::max<std::size_t>(1, opt_.io_threads); ++i) threads_.emplace_back([this] { ioc_.run(); });
    ctx_->write_log("listening on " + opt_.bind.host + ":" + std::to_string(port()));
  }

  std::uint16_t port() const { return acceptor_.local_endpoint().port(); }

  void stop() {
    if (stopped_.exchange(true)) return;
    ioc_.stop();
    for (auto& t : threads_) t.join();
    threads_.clear();
    ctx_->render_pool.join();
  }

  /// Blocks until stop() is called from another thread or a signal.
  void wait() {
    for (auto& t : threads_) t.join();
    threads_.clear();
  }

  SessionRegistry& sessions() { return ctx_->sessions; }

 private:
  void do_accept() {
    acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (!ec) std::make_shared<detail::HttpConnection>(std::move(socket), ctx_)->run();
      if (acceptor_.is_open()) do_accept();
    });
  }

  ServerOptions opt_;
  std::shared_ptr<detail::Context> ctx_;
  net::io_context ioc_;
  tcp::acceptor acceptor_;
  std::vector<std::thread> threads_;
  std::atomic<bool> stopped_{false};
};

}  // namespace nvs::service
