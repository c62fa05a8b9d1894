#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedkappa/common/error.hpp"
#include "fedkappa/fed/protocol.hpp"

namespace fedkappa::fed {

/// A framed, ordered, bidirectional byte stream.
class Connection {
 public:
  virtual ~Connection() = default;

  void send(const Message& msg);
  /// Reads one frame. Returns nullopt on a clean end of stream between
  /// frames; throws Truncated if the stream ends inside a frame and the codec
  /// errors (BadMagic, VersionMismatch, Malformed) on bad input.
  std::optional<Message> receive();

  /// Writes bytes verbatim (used to inject malformed frames in tests).
  virtual void write_bytes(std::span<const std::uint8_t> bytes) = 0;
  /// No more writes from this side; the peer sees end of stream.
  virtual void close_write() = 0;
  /// Closes both directions and unblocks a pending read.
  virtual void close() = 0;
  virtual std::string describe() const = 0;

 protected:
  /// Fills `out` completely; returns the number of bytes read before end of
  /// stream (less than out.size() only at end of stream).
  virtual std::size_t read_bytes(std::span<std::uint8_t> out) = 0;
};

/// Two connected in-process endpoints.
std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_inproc_pair();

/// "host:port" -> (host, port). Throws InvalidConfig.
std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& text);

class TcpListener {
 public:
  /// Binds and listens; port 0 picks a free port.
  TcpListener(const std::string& host, std::uint16_t port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  /// Waits up to `timeout` for a connection; nullopt on timeout or after close().
  std::unique_ptr<Connection> accept(std::chrono::milliseconds timeout);
  void close();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// Connects, retrying until `retry_for` elapses. Throws IoError.
std::unique_ptr<Connection> tcp_connect(const std::string& host, std::uint16_t port,
                                        std::chrono::milliseconds retry_for = std::chrono::seconds(30));

/// Server-side fan-in: one reader thread per session feeding a single inbox.
class Hub {
 public:
  struct Event {
    enum class Kind { Message, Closed, Failed };
    std::size_t session = 0;
    Kind kind = Kind::Message;
    std::optional<fed::Message> msg;
    std::optional<Error> error;
  };

  Hub() = default;
  ~Hub();
  Hub(const Hub&) = delete;
  Hub& operator=(const Hub&) = delete;

  /// Takes ownership and starts reading. Returns the session index.
  std::size_t add(std::unique_ptr<Connection> conn);
  /// Waits for the next event; nullopt on timeout.
  std::optional<Event> next(std::chrono::milliseconds timeout);
  /// Send failures are reported as a Failed event for that session.
  void send(std::size_t session, const Message& msg);
  void close_write(std::size_t session);
  /// Waits up to `grace` for every peer to close, then closes everything and
  /// joins the readers.
  void shutdown(std::chrono::milliseconds grace);
  std::string describe(std::size_t session) const;

 private:
  struct Session {
    std::unique_ptr<Connection> conn;
    std::thread reader;
    bool ended = false;
  };
  void push(Event e);

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Event> inbox_;
  std::vector<std::unique_ptr<Session>> sessions_;
  bool stopping_ = false;
};

}  // namespace fedkappa::fed
