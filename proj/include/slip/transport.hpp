#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "slip/decomposer.hpp"
#include "slip/errors.hpp"
#include "slip/protocol.hpp"

namespace slip {

// ---------------------------------------------------------------------------
// Wire format
//
//   offset  size  field
//   0       4     magic "SLP1"
//   4       1     tag
//   5       4     layer index, u32 little-endian
//   9       8     payload length in elements, u64 little-endian
//   17      8*n   payload, u64 little-endian each
// ---------------------------------------------------------------------------

enum class FrameTag : std::uint8_t {
  kLayerInput = 0x01,
  kLayerReply = 0x02,
  kFinalOutput = 0x03,
  kAbort = 0x04,
  kSessionHello = 0x10,
  kSessionAccept = 0x11,
};

inline constexpr std::size_t kFrameHeaderSize = 17;
inline constexpr std::uint64_t kMaxPayloadElements = std::uint64_t{1} << 24;
inline constexpr std::uint16_t kDefaultPort = 7462;
inline constexpr std::uint64_t kWireVersion = 1;

struct WireFrame {
  FrameTag tag = FrameTag::kAbort;
  std::uint32_t layer = 0;
  std::vector<std::uint64_t> payload;
  bool operator==(const WireFrame&) const = default;
};

std::vector<std::uint8_t> encode_frame(const WireFrame& frame);
/// Total frame length once the header is available, nothing before that.
/// Throws FrameError on bad magic, unknown tag or oversize payload.
std::optional<std::size_t> frame_length(std::span<const std::uint8_t> bytes);
/// Decodes exactly one frame; trailing bytes are an error.
WireFrame decode_frame(std::span<const std::uint8_t> bytes);
/// Splits a concatenated stream; throws FrameError on a truncated tail.
std::vector<WireFrame> split_frames(std::span<const std::uint8_t> bytes);

WireFrame to_frame(const Message& m);
/// Rejects residues >= p for the data-carrying tags.
Message to_message(const WireFrame& frame, const PrimeField& field);

std::vector<std::uint8_t> encode_message(const Message& m);
Message decode_message(std::span<const std::uint8_t> bytes,
                       const PrimeField& field);

struct SessionHello {
  std::uint64_t version = kWireVersion;
  Mode mode = Mode::kHonest;
  Residue modulus = PrimeField::kMersenne61;
  int frac_bits = FixedPointCodec::kDefaultFracBits;
  std::vector<std::size_t> dims;  // d_1 .. d_{L+1}
  std::size_t check_count = 0;
  bool operator==(const SessionHello&) const = default;

  static SessionHello for_session(const Decomposition& d, Mode mode,
                                  std::size_t check_count);
};

enum class AcceptStatus : std::uint64_t {
  kAccepted = 0,
  kVersionMismatch = 1,
  kModulusMismatch = 2,
  kFracBitsMismatch = 3,
  kDimsMismatch = 4,
  kMalformed = 5,
};

const char* accept_status_name(AcceptStatus s);

WireFrame hello_frame(const SessionHello& hello);
SessionHello parse_hello(const WireFrame& frame);
/// What David answers to a hello, given his stored parts.
AcceptStatus check_hello(const SessionHello& hello, const DavidParts& parts);

class HandshakeError : public SessionError {
 public:
  HandshakeError(AcceptStatus status, const std::string& what)
      : SessionError(what), status_(status) {}
  AcceptStatus status() const noexcept { return status_; }

 private:
  AcceptStatus status_;
};

// ---------------------------------------------------------------------------
// In-process channel
// ---------------------------------------------------------------------------

/// Ordered channel to a David running in the same process. Each message
/// Charlie sends is delivered to David immediately; his reply is queued.
class InProcTransport : public Transport {
 public:
  explicit InProcTransport(const DavidParts& parts,
                           DavidState::ReplyHook hook = {});

  void send(const Message& m) override;
  Message receive() override;
  std::optional<Transcript> peer_transcript() const override {
    return david_.transcript();
  }
  const DavidState& david() const noexcept { return david_; }

 private:
  DavidState david_;
  std::deque<Message> to_charlie_;
};

// ---------------------------------------------------------------------------
// TCP
// ---------------------------------------------------------------------------

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;
};

/// "host:port", "host" or ":port"; missing parts take the defaults.
Endpoint parse_endpoint(const std::string& text);
/// SLIPWIRE_ADDR when set, otherwise `fallback`.
Endpoint endpoint_from_env(const std::string& fallback = "");

/// Owned socket descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket();

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void shutdown() noexcept;

  void write_all(std::span<const std::uint8_t> bytes);
  /// False on clean EOF before the first byte; throws SessionError otherwise.
  bool read_exact(std::span<std::uint8_t> out);

  WireFrame read_frame();
  void write_frame(const WireFrame& frame);

 private:
  int fd_ = -1;
};

Socket connect_to(const Endpoint& ep);

/// Charlie's side of a TCP session. The handshake runs in the constructor.
class TcpTransport : public Transport {
 public:
  TcpTransport(const Endpoint& ep, const SessionHello& hello);

  void send(const Message& m) override;
  Message receive() override;

 private:
  Socket socket_;
  PrimeField field_;
};

std::unique_ptr<TcpTransport> connect_charlie(const Endpoint& ep,
                                              const SessionHello& hello);

struct ServerOptions {
  /// Builds the reply hook for the n-th accepted session (adversarial Davids).
  std::function<DavidState::ReplyHook(std::uint64_t)> hook_factory;
  /// Called once per session with David's transcript, from the session's
  /// thread; must be thread-safe.
  std::function<void(std::uint64_t, const SessionHello&, const Transcript&)>
      on_session_end;
};

/// David as a worker service: one session per connection, concurrent
/// connections, read-only access to the stored parts.
class DavidServer {
 public:
  DavidServer(DavidParts parts, const Endpoint& bind, ServerOptions opts = {});
  ~DavidServer();
  DavidServer(const DavidServer&) = delete;
  DavidServer& operator=(const DavidServer&) = delete;

  /// Port actually bound (useful with port 0).
  std::uint16_t port() const noexcept { return port_; }
  void start();
  /// Blocks until stop() is called from elsewhere.
  void serve_forever();
  void stop();

 private:
  void handle(Socket conn, std::uint64_t session_id);

  DavidParts parts_;
  ServerOptions opts_;
  Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> next_session_{0};
  std::thread accept_thread_;
  std::mutex workers_mu_;
  std::vector<std::thread> workers_;
};

/// Blocking entry point used by the CLI.
void serve_david(const Endpoint& bind, const DavidParts& parts,
                 ServerOptions opts = {});

}  // namespace slip
