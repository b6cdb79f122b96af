#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <chrono>
#include <cstring>
#include <mutex>
#include <set>
#include <thread>
#include <utility>

#include "umic/netproto.hpp"

namespace umic {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string sys_error(const std::string& what) { return what + ": " + std::strerror(errno); }

class Socket {
 public:
  explicit Socket(int fd = -1) : fd_(fd) {}
  ~Socket() { reset(); }
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  int get() const noexcept { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_;
};

struct AddrInfo {
  addrinfo* list = nullptr;
  ~AddrInfo() {
    if (list) freeaddrinfo(list);
  }
};

void resolve(const Endpoint& ep, bool passive, AddrInfo& out) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  const std::string port = std::to_string(ep.port);
  const int rc = getaddrinfo(ep.host.empty() ? nullptr : ep.host.c_str(), port.c_str(), &hints, &out.list);
  if (rc != 0) throw TransportError("resolve " + ep.host + ": " + gai_strerror(rc));
}

bool send_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

}  // namespace

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) throw ParameterError("endpoint '" + text + "': expected host:port");
  std::string host = text.substr(0, colon);
  if (host.size() >= 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  const std::string port = text.substr(colon + 1);
  unsigned value = 0;
  const auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
  if (ec != std::errc() || ptr != port.data() + port.size() || value > 65535 || port.empty()) {
    throw ParameterError("endpoint '" + text + "': bad port");
  }
  if (host.empty()) throw ParameterError("endpoint '" + text + "': empty host");
  return Endpoint{host, static_cast<std::uint16_t>(value)};
}

TokenBucket::TokenBucket(double rate) : rate_(rate) {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw ParameterError("token bucket: rate must be positive");
}

double TokenBucket::reserve(std::uint64_t bits) {
  total_bits_ += bits;
  return static_cast<double>(total_bits_) / rate_;
}

StreamStats stream_node(const NodeRecording& recording, const Endpoint& endpoint, const StreamOptions& options) {
  TokenBucket bucket(options.rate_cap);
  const auto frames = frames_of(recording, options.chunk_samples);
  StreamStats stats;

  AddrInfo ai;
  try {
    resolve(endpoint, false, ai);
  } catch (const TransportError& e) {
    throw StreamError(e.what(), stats);
  }
  Socket sock;
  for (addrinfo* a = ai.list; a; a = a->ai_next) {
    Socket s(::socket(a->ai_family, a->ai_socktype, a->ai_protocol));
    if (s.get() < 0) continue;
    if (::connect(s.get(), a->ai_addr, a->ai_addrlen) == 0) {
      sock = std::move(s);
      break;
    }
  }
  if (sock.get() < 0) {
    throw StreamError(sys_error("connect " + endpoint.host + ":" + std::to_string(endpoint.port)), stats);
  }
  const int one = 1;
  ::setsockopt(sock.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);

  const std::set<std::uint32_t> dup(options.duplicate_seqs.begin(), options.duplicate_seqs.end());
  const auto t0 = Clock::now();
  auto send_frame = [&](const Frame& f) {
    const auto bytes = encode_frame(f);
    const double at = bucket.reserve(bytes.size() * 8);
    std::this_thread::sleep_until(t0 + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(at)));
    if (!send_all(sock.get(), bytes.data(), bytes.size())) {
      stats.duration = seconds_since(t0);
      throw StreamError(sys_error("send to node collector"), stats);
    }
    stats.bytes_sent += bytes.size();
    ++stats.frames_sent;
  };
  for (const auto& f : frames) {
    if (options.abort_after_frames && stats.frames_sent >= *options.abort_after_frames) {
      stats.truncated = true;
      break;
    }
    send_frame(f);
    if (dup.count(f.seq) && !f.is_end()) {
      send_frame(f);
      ++stats.retransmits;
    }
  }
  stats.duration = seconds_since(t0);
  stats.achieved_rate = stats.duration > 0.0 ? static_cast<double>(stats.bytes_sent) * 8.0 / stats.duration : 0.0;
  return stats;
}

struct CollectionServer::State {
  std::mutex mutex;
  std::set<NodeId> registered;
  ServeResult result;
  std::size_t ended = 0;
  std::atomic<bool> stop{false};
  std::vector<std::thread> threads;

  void handle(int raw_fd);
};

void CollectionServer::State::handle(int raw_fd) {
  Socket fd(raw_fd);
  FrameParser parser;
  std::optional<Reassembler> ra;
  std::optional<std::string> error;
  std::uint64_t bytes = 0;
  std::optional<Clock::time_point> first_byte;
  double duration = 0.0;
  std::vector<std::uint8_t> buf(1 << 16);

  auto reject = [&](const std::string& why) {
    std::lock_guard lock(mutex);
    result.rejected.push_back(why);
  };

  try {
    while (!stop.load() && !(ra && ra->finished())) {
      pollfd p{fd.get(), POLLIN, 0};
      const int r = ::poll(&p, 1, 100);
      if (r < 0 && errno != EINTR) throw TransportError(sys_error("poll"));
      if (r <= 0) continue;
      const ssize_t k = ::recv(fd.get(), buf.data(), buf.size(), 0);
      if (k < 0) {
        if (errno == EINTR) continue;
        throw TransportError(sys_error("recv"));
      }
      if (k == 0) break;
      if (!first_byte) first_byte = Clock::now();
      bytes += static_cast<std::uint64_t>(k);
      parser.feed(std::span<const std::uint8_t>(buf.data(), static_cast<std::size_t>(k)));
      while (auto f = parser.next()) {
        if (!ra) {
          std::lock_guard lock(mutex);
          if (!registered.insert(f->node_id).second) {
            result.rejected.push_back("node " + std::to_string(f->node_id) + ": duplicate node id");
            return;
          }
          ra.emplace(f->node_id);
        }
        ra->push(*f);
        if (ra->finished()) break;
      }
      if (first_byte) duration = seconds_since(*first_byte);
    }
  } catch (const Error& e) {
    if (!ra) {
      reject(std::string("unregistered connection: ") + e.what());
      return;
    }
    error = e.what();
  }
  if (!ra) {
    reject(stop.load() ? "connection closed at shutdown" : "connection closed before the first frame");
    return;
  }
  NodeResult nr;
  const auto frames = ra->frames();
  nr.recording = ra->take(nr.stats);
  nr.stats.bytes_sent = bytes;
  nr.stats.frames_sent = frames;
  nr.stats.duration = duration;
  nr.stats.achieved_rate = duration > 0.0 ? static_cast<double>(bytes) * 8.0 / duration : 0.0;
  nr.error = error;
  std::lock_guard lock(mutex);
  result.nodes[nr.recording.node_id] = std::move(nr);
  ++ended;
}

CollectionServer::CollectionServer(const Endpoint& bind, const ServerOptions& options)
    : options_(options), state_(std::make_unique<State>()) {
  if (options.expected_nodes == 0) throw ParameterError("server: expected_nodes must be positive");
  if (!(options.timeout > 0.0)) throw ParameterError("server: timeout must be positive");
  AddrInfo ai;
  resolve(bind, true, ai);
  for (addrinfo* a = ai.list; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, a->ai_addr, a->ai_addrlen) == 0 && ::listen(fd, 64) == 0) {
      listen_fd_ = fd;
      break;
    }
    ::close(fd);
  }
  if (listen_fd_ < 0) throw TransportError(sys_error("bind " + bind.host + ":" + std::to_string(bind.port)));
  sockaddr_storage addr{};
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = addr.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port)
                                     : ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
}

CollectionServer::~CollectionServer() {
  state_->stop = true;
  for (auto& t : state_->threads) {
    if (t.joinable()) t.join();
  }
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

ServeResult CollectionServer::run() {
  State& st = *state_;
  const auto t0 = Clock::now();
  bool timed_out = false;
  for (;;) {
    {
      std::lock_guard lock(st.mutex);
      if (st.ended >= options_.expected_nodes) break;
    }
    if (seconds_since(t0) > options_.timeout) {
      timed_out = true;
      break;
    }
    pollfd p{listen_fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, 50);
    if (r <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    st.threads.emplace_back([&st, fd] { st.handle(fd); });
  }
  st.stop = true;
  for (auto& t : st.threads) t.join();
  st.threads.clear();
  if (timed_out) {
    throw TransportError("server: " + std::to_string(st.ended) + " of " + std::to_string(options_.expected_nodes) +
                         " nodes finished before the timeout");
  }
  return std::move(st.result);
}

ServeResult serve(const Endpoint& bind, const ServerOptions& options) {
  CollectionServer server(bind, options);
  return server.run();
}

}  // namespace umic
