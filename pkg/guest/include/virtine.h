/* Guest-side hypercall ABI.
 *
 * Hypercalls are a 32-bit OUT to port 0xFF whose value is the
 * guest-physical address of a 64-byte frame: nr u64, args[6] u64,
 * ret i64, little-endian.  The host validates everything; a denied or
 * malformed call terminates the virtine.
 */

#ifndef VIRTINE_H
#define VIRTINE_H

#define VIRTINE_HC_PORT 0xFF

#define HC_EXIT        0
#define HC_SNAPSHOT    1
#define HC_GET_DATA    2
#define HC_RETURN_DATA 3
#define HC_READ        4
#define HC_WRITE       5
#define HC_OPEN        6
#define HC_CLOSE       7
#define HC_STAT        8
#define HC_SEND        9
#define HC_RECV        10
#define HC_TIMESTAMP   11

/* Milestone marker ids reported through HC_TIMESTAMP. */
#define MARK_CALIBRATE            0x00
#define MARK_FIRST_INSTRUCTION    0x01
#define MARK_LGDT32               0x02
#define MARK_PROTECTED_TRANSITION 0x03
#define MARK_LJMP32               0x04
#define MARK_IDENT_MAP            0x05
#define MARK_LONG_TRANSITION      0x06
#define MARK_LJMP64               0x07
#define MARK_ENTRY_C              0x08
#define MARK_RECV_DONE            0x09
#define MARK_SEND_DONE            0x0A
#define MARK_ALLOC                0x40

#ifndef __ASSEMBLER__

typedef unsigned long long u64;
typedef long long i64;
typedef unsigned int u32;

struct vframe {
    u64 nr;
    u64 args[6];
    i64 ret;
} __attribute__((aligned(8)));

static inline i64 hypercall(struct vframe *f)
{
    __asm__ volatile("outl %0, %1"
                     : /* ret read back from the frame */
                     : "a"((u32)(unsigned long)f), "N"(VIRTINE_HC_PORT)
                     : "memory");
    return f->ret;
}

static inline i64 hc3(u64 nr, u64 a0, u64 a1, u64 a2)
{
    static struct vframe f;
    f.nr = nr;
    f.args[0] = a0;
    f.args[1] = a1;
    f.args[2] = a2;
    f.args[3] = f.args[4] = f.args[5] = 0;
    f.ret = 0;
    return hypercall(&f);
}

static inline void vexit(i64 code)
{
    hc3(HC_EXIT, (u64)code, 0, 0);
    for (;;)
        __asm__ volatile("hlt");
}

static inline i64 vsnapshot(void) { return hc3(HC_SNAPSHOT, 0, 0, 0); }
static inline i64 vget_data(void *buf, u64 len) { return hc3(HC_GET_DATA, (u64)(unsigned long)buf, len, 0); }
static inline i64 vreturn_data(const void *buf, u64 len) { return hc3(HC_RETURN_DATA, (u64)(unsigned long)buf, len, 0); }
static inline i64 vread(i64 fd, void *buf, u64 len) { return hc3(HC_READ, (u64)fd, (u64)(unsigned long)buf, len); }
static inline i64 vwrite(i64 fd, const void *buf, u64 len) { return hc3(HC_WRITE, (u64)fd, (u64)(unsigned long)buf, len); }
static inline i64 vopen(const char *path, u64 len, u64 flags) { return hc3(HC_OPEN, (u64)(unsigned long)path, len, flags); }
static inline i64 vclose(i64 fd) { return hc3(HC_CLOSE, (u64)fd, 0, 0); }
static inline i64 vstat(const char *path, u64 len, void *out) { return hc3(HC_STAT, (u64)(unsigned long)path, len, (u64)(unsigned long)out); }
static inline i64 vsend(i64 fd, const void *buf, u64 len) { return hc3(HC_SEND, (u64)fd, (u64)(unsigned long)buf, len); }
static inline i64 vrecv(i64 fd, void *buf, u64 len) { return hc3(HC_RECV, (u64)fd, (u64)(unsigned long)buf, len); }
static inline i64 vtimestamp(u64 marker) { return hc3(HC_TIMESTAMP, marker, 0, 0); }

/* Fixed 64-byte stat record. */
struct vstat_record {
    u64 size;
    u64 mode;
    u64 mtime;
    u64 pad[5];
};

/* support.c */
void *memset(void *dst, int value, unsigned long n);
void *memcpy(void *dst, const void *src, unsigned long n);
int memcmp(const void *a, const void *b, unsigned long n);
unsigned long strlen(const char *s);
unsigned long format_u64(char *dst, u64 value);
void *balloc(unsigned long n);
unsigned long base64_encode(const unsigned char *src, unsigned long n, char *dst);

#endif /* !__ASSEMBLER__ */

#endif /* VIRTINE_H */
