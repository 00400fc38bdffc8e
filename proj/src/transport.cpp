#include "slip/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>

namespace slip {

namespace {

constexpr std::uint8_t kMagic[4] = {'S', 'L', 'P', '1'};

void put_le(std::uint8_t* out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

bool known_tag(std::uint8_t t) {
  return (t >= 0x01 && t <= 0x04) || t == 0x10 || t == 0x11;
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const WireFrame& frame) {
  std::vector<std::uint8_t> out(kFrameHeaderSize + 8 * frame.payload.size());
  std::uint8_t* p = out.data();
  std::memcpy(p, kMagic, 4);
  p[4] = static_cast<std::uint8_t>(frame.tag);
  put_le(p + 5, frame.layer, 4);
  put_le(p + 9, frame.payload.size(), 8);
  p += kFrameHeaderSize;
  for (std::uint64_t e : frame.payload) {
    put_le(p, e, 8);
    p += 8;
  }
  return out;
}

std::optional<std::size_t> frame_length(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize) return std::nullopt;
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FrameError("bad magic");
  if (!known_tag(bytes[4])) {
    throw FrameError("unknown tag 0x" + std::to_string(bytes[4]));
  }
  const std::uint64_t n = get_u64(bytes.data() + 9);
  if (n > kMaxPayloadElements) {
    throw FrameError("payload of " + std::to_string(n) + " elements is too large");
  }
  return kFrameHeaderSize + 8 * static_cast<std::size_t>(n);
}

WireFrame decode_frame(std::span<const std::uint8_t> bytes) {
  const auto len = frame_length(bytes);
  if (!len) throw FrameError("truncated header");
  if (bytes.size() < *len) throw FrameError("truncated payload");
  if (bytes.size() > *len) throw FrameError("trailing bytes after frame");
  WireFrame f;
  f.tag = static_cast<FrameTag>(bytes[4]);
  f.layer = get_u32(bytes.data() + 5);
  const std::size_t n = (*len - kFrameHeaderSize) / 8;
  f.payload.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    f.payload[i] = get_u64(bytes.data() + kFrameHeaderSize + 8 * i);
  return f;
}

std::vector<WireFrame> split_frames(std::span<const std::uint8_t> bytes) {
  std::vector<WireFrame> frames;
  while (!bytes.empty()) {
    const auto len = frame_length(bytes);
    if (!len || bytes.size() < *len) throw FrameError("truncated frame in stream");
    frames.push_back(decode_frame(bytes.first(*len)));
    bytes = bytes.subspan(*len);
  }
  return frames;
}

WireFrame to_frame(const Message& m) {
  return std::visit(
      [](const auto& msg) -> WireFrame {
        using T = std::decay_t<decltype(msg)>;
        if constexpr (std::is_same_v<T, LayerInput>) {
          return {FrameTag::kLayerInput, msg.layer, msg.values};
        } else if constexpr (std::is_same_v<T, LayerReply>) {
          return {FrameTag::kLayerReply, msg.layer, msg.values};
        } else if constexpr (std::is_same_v<T, FinalOutput>) {
          return {FrameTag::kFinalOutput, msg.layer, msg.values};
        } else {
          return {FrameTag::kAbort, msg.layer, {}};
        }
      },
      m);
}

Message to_message(const WireFrame& frame, const PrimeField& field) {
  switch (frame.tag) {
    case FrameTag::kLayerInput:
    case FrameTag::kLayerReply:
    case FrameTag::kFinalOutput:
      for (std::uint64_t e : frame.payload) {
        if (!field.contains(e)) {
          throw FrameError("residue " + std::to_string(e) +
                           " is not below the session modulus");
        }
      }
      if (frame.tag == FrameTag::kLayerInput)
        return LayerInput{frame.layer, frame.payload};
      if (frame.tag == FrameTag::kLayerReply)
        return LayerReply{frame.layer, frame.payload};
      return FinalOutput{frame.layer, frame.payload};
    case FrameTag::kAbort:
      if (!frame.payload.empty()) throw FrameError("abort frame with payload");
      return Abort{frame.layer};
    default:
      throw FrameError("handshake frame inside a session");
  }
}

std::vector<std::uint8_t> encode_message(const Message& m) {
  return encode_frame(to_frame(m));
}

Message decode_message(std::span<const std::uint8_t> bytes,
                       const PrimeField& field) {
  return to_message(decode_frame(bytes), field);
}

SessionHello SessionHello::for_session(const Decomposition& d, Mode mode,
                                       std::size_t check_count) {
  SessionHello h;
  h.mode = mode;
  h.modulus = d.codec.field().modulus();
  h.frac_bits = d.codec.frac_bits();
  h.dims = d.dims();
  h.check_count = mode == Mode::kMalicious ? check_count : 0;
  return h;
}

const char* accept_status_name(AcceptStatus s) {
  switch (s) {
    case AcceptStatus::kAccepted:
      return "accepted";
    case AcceptStatus::kVersionMismatch:
      return "version mismatch";
    case AcceptStatus::kModulusMismatch:
      return "modulus mismatch";
    case AcceptStatus::kFracBitsMismatch:
      return "fraction bits mismatch";
    case AcceptStatus::kDimsMismatch:
      return "dimension mismatch";
    case AcceptStatus::kMalformed:
      return "malformed hello";
  }
  return "unknown";
}

WireFrame hello_frame(const SessionHello& h) {
  WireFrame f{FrameTag::kSessionHello, 0, {}};
  f.payload = {h.version, static_cast<std::uint64_t>(h.mode), h.modulus,
               static_cast<std::uint64_t>(h.frac_bits), h.dims.size() - 1};
  for (std::size_t d : h.dims) f.payload.push_back(d);
  f.payload.push_back(h.check_count);
  return f;
}

SessionHello parse_hello(const WireFrame& f) {
  if (f.tag != FrameTag::kSessionHello) throw FrameError("expected SessionHello");
  const auto& p = f.payload;
  if (p.size() < 6 || p[4] == 0 || p.size() != 5 + (p[4] + 1) + 1) {
    throw FrameError("malformed SessionHello payload");
  }
  if (p[1] > 2) throw FrameError("unknown mode byte");
  if (p[3] > 30) throw FrameError("fraction bits out of range");
  SessionHello h;
  h.version = p[0];
  h.mode = static_cast<Mode>(p[1]);
  h.modulus = p[2];
  h.frac_bits = static_cast<int>(p[3]);
  h.dims.assign(p.begin() + 5, p.begin() + 5 + static_cast<std::ptrdiff_t>(p[4] + 1));
  h.check_count = p.back();
  return h;
}

AcceptStatus check_hello(const SessionHello& h, const DavidParts& parts) {
  if (h.version != kWireVersion) return AcceptStatus::kVersionMismatch;
  if (h.modulus != parts.field.modulus()) return AcceptStatus::kModulusMismatch;
  if (h.frac_bits != parts.frac_bits) return AcceptStatus::kFracBitsMismatch;
  if (h.dims != parts.dims) return AcceptStatus::kDimsMismatch;
  if (h.mode == Mode::kMalicious && h.check_count == 0)
    return AcceptStatus::kMalformed;
  return AcceptStatus::kAccepted;
}

InProcTransport::InProcTransport(const DavidParts& parts,
                                 DavidState::ReplyHook hook)
    : david_(parts, std::move(hook)) {}

void InProcTransport::send(const Message& m) {
  if (auto reply = david_step(david_, m)) to_charlie_.push_back(std::move(*reply));
}

Message InProcTransport::receive() {
  if (to_charlie_.empty()) throw SessionError("no message pending from David");
  Message m = std::move(to_charlie_.front());
  to_charlie_.pop_front();
  return m;
}

Endpoint parse_endpoint(const std::string& text) {
  Endpoint ep;
  if (text.empty()) return ep;
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) {
    ep.host = text;
    return ep;
  }
  if (colon > 0) ep.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  if (!port.empty()) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(port.c_str(), &end, 10);
    if (*end != '\0' || v > 65535) throw Error("bad port in '" + text + "'");
    ep.port = static_cast<std::uint16_t>(v);
  }
  return ep;
}

Endpoint endpoint_from_env(const std::string& fallback) {
  if (const char* env = std::getenv("SLIPWIRE_ADDR"); env && *env) {
    return parse_endpoint(env);
  }
  return parse_endpoint(fallback);
}

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = std::exchange(o.fd_, -1);
  }
  return *this;
}

Socket::~Socket() {
  if (fd_ >= 0) ::close(fd_);
}

void Socket::shutdown() noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::write_all(std::span<const std::uint8_t> bytes) {
  while (!bytes.empty()) {
    const ssize_t n = ::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw SessionError(std::string("send failed: ") + std::strerror(errno));
    }
    bytes = bytes.subspan(static_cast<std::size_t>(n));
  }
}

bool Socket::read_exact(std::span<std::uint8_t> out) {
  std::size_t got = 0;
  while (got < out.size()) {
    const ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
    if (n == 0) {
      if (got == 0) return false;
      throw SessionError("connection closed mid-frame");
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      throw SessionError(std::string("recv failed: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(n);
  }
  return true;
}

WireFrame Socket::read_frame() {
  std::vector<std::uint8_t> buf(kFrameHeaderSize);
  if (!read_exact(buf)) throw SessionError("connection closed by peer");
  std::size_t len = 0;
  try {
    len = *frame_length(buf);
  } catch (const FrameError& e) {
    throw SessionError(std::string("bad frame: ") + e.what());
  }
  buf.resize(len);
  if (len > kFrameHeaderSize &&
      !read_exact(std::span(buf).subspan(kFrameHeaderSize))) {
    throw SessionError("connection closed mid-frame");
  }
  return decode_frame(buf);
}

void Socket::write_frame(const WireFrame& frame) { write_all(encode_frame(frame)); }

Socket connect_to(const Endpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(ep.port);
  if (int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw SessionError("cannot resolve " + ep.host + ": " + ::gai_strerror(rc));
  }
  std::string last = "no addresses";
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (!s.valid()) continue;
    if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
      ::freeaddrinfo(res);
      int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return s;
    }
    last = std::strerror(errno);
  }
  ::freeaddrinfo(res);
  throw SessionError("cannot connect to " + ep.host + ":" + port + ": " + last);
}

TcpTransport::TcpTransport(const Endpoint& ep, const SessionHello& hello)
    : socket_(connect_to(ep)), field_(hello.modulus) {
  socket_.write_frame(hello_frame(hello));
  const WireFrame reply = socket_.read_frame();
  if (reply.tag != FrameTag::kSessionAccept || reply.payload.size() != 1) {
    throw SessionError("expected SessionAccept from David");
  }
  const auto status = static_cast<AcceptStatus>(reply.payload[0]);
  if (status != AcceptStatus::kAccepted) {
    throw HandshakeError(status, std::string("David refused the session: ") +
                                     accept_status_name(status));
  }
}

void TcpTransport::send(const Message& m) { socket_.write_frame(to_frame(m)); }

Message TcpTransport::receive() {
  const WireFrame f = socket_.read_frame();
  try {
    return to_message(f, field_);
  } catch (const FrameError& e) {
    throw SessionError(std::string("rejected frame from David: ") + e.what());
  }
}

std::unique_ptr<TcpTransport> connect_charlie(const Endpoint& ep,
                                              const SessionHello& hello) {
  return std::make_unique<TcpTransport>(ep, hello);
}

DavidServer::DavidServer(DavidParts parts, const Endpoint& bind,
                         ServerOptions opts)
    : parts_(std::move(parts)), opts_(std::move(opts)) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(bind.port);
  const char* host = bind.host.empty() ? nullptr : bind.host.c_str();
  if (int rc = ::getaddrinfo(host, port.c_str(), &hints, &res); rc != 0) {
    throw SessionError("cannot resolve " + bind.host + ": " + ::gai_strerror(rc));
  }
  listener_ = Socket(::socket(res->ai_family, res->ai_socktype, res->ai_protocol));
  int one = 1;
  ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const int rc = ::bind(listener_.fd(), res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0 || ::listen(listener_.fd(), 64) != 0) {
    throw SessionError("cannot listen on " + bind.host + ":" + port + ": " +
                       std::strerror(errno));
  }
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

DavidServer::~DavidServer() { stop(); }

void DavidServer::start() {
  accept_thread_ = std::thread([this] { serve_forever(); });
}

void DavidServer::serve_forever() {
  while (!stopping_) {
    const int fd = ::accept(listener_.fd(), nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      break;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    const std::uint64_t id = next_session_++;
    std::lock_guard lock(workers_mu_);
    workers_.emplace_back(
        [this, fd, id] { handle(Socket(fd), id); });
  }
}

void DavidServer::stop() {
  if (stopping_.exchange(true)) return;
  listener_.shutdown();
  if (accept_thread_.joinable()) accept_thread_.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(workers_mu_);
    workers.swap(workers_);
  }
  for (auto& t : workers) t.join();
}

void DavidServer::handle(Socket conn, std::uint64_t session_id) {
  SessionHello hello;
  try {
    const WireFrame first = conn.read_frame();
    AcceptStatus status = AcceptStatus::kMalformed;
    try {
      hello = parse_hello(first);
      status = check_hello(hello, parts_);
    } catch (const FrameError&) {
    }
    conn.write_frame({FrameTag::kSessionAccept, 0,
                      {static_cast<std::uint64_t>(status)}});
    if (status != AcceptStatus::kAccepted) return;
  } catch (const Error&) {
    return;
  }

  DavidState::ReplyHook hook;
  if (opts_.hook_factory) hook = opts_.hook_factory(session_id);
  DavidState david(parts_, std::move(hook));
  try {
    while (!david.done()) {
      const Message in = to_message(conn.read_frame(), parts_.field);
      if (auto reply = david_step(david, in)) conn.write_frame(to_frame(*reply));
    }
  } catch (const Error&) {
    // Malformed or out-of-order traffic ends the session; Charlie sees EOF.
  }
  if (opts_.on_session_end) opts_.on_session_end(session_id, hello, david.transcript());
}

void serve_david(const Endpoint& bind, const DavidParts& parts,
                 ServerOptions opts) {
  DavidServer server(parts, bind, std::move(opts));
  server.serve_forever();
}

}  // namespace slip
